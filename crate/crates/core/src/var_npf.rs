//! Variational nudged particle filter.
//!
//! A strong-constraint variational solve over the observation interval gives
//! a deterministic path. Its values at the subinterval endpoints serve as
//! pseudo-observations `Y†`, and every particle's control on subinterval `j`
//! aims at `Y†` at the end of that same subinterval. Control horizons are
//! therefore always one subinterval long.

use std::time::Instant;

use nalgebra::DVector;

use crate::diagnostics::{CycleDiagnostics, CycleNoise, CycleOptions, VariationalDiagnostics};
use crate::ensemble::{self, ObservationModel, ParticleEnsemble};
use crate::error::{FilterError, Result};
use crate::nudging::{nudged_cycle, NudgingConfig, SubintervalTarget};
use crate::sde::SdeModel;
use crate::variational::{self, PseudoObservationPath, VariationalProblem, VariationalSettings};

/// Observation used by the Bayes update at the end of the cycle.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReweightTarget {
    #[default]
    TrueObservation,
    PseudoObservation,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VarNpfConfig {
    pub variational: VariationalSettings,
    /// Solve again at every subinterval start from the current particles
    /// instead of once per observation interval.
    pub resolve_per_subinterval: bool,
    pub reweight_against: ReweightTarget,
}

impl VarNpfConfig {
    pub fn validate(&self) -> Result<()> {
        self.variational.validate()
    }
}

struct Solve {
    path: PseudoObservationPath,
    status: crate::optimizer::OptimStatus,
    iterations: usize,
    initial_cost: f64,
    final_cost: f64,
    x_opt: DVector<f64>,
}

#[allow(clippy::too_many_arguments)]
fn solve_window<M: SdeModel + ?Sized>(
    model: &M,
    obs_model: &ObservationModel,
    states: &[DVector<f64>],
    weights: &[f64],
    observation: &DVector<f64>,
    t0: f64,
    t1: f64,
    dt: f64,
    subintervals: usize,
    settings: &VariationalSettings,
) -> Result<Solve> {
    let moments = ensemble::weighted_moments(states, weights);
    let problem = VariationalProblem::new(model, obs_model, &moments, observation, t0, t1, dt, settings)?;
    let initial_cost = variational::variational_cost(&moments.mean, &problem);
    let opt = variational::minimize_cost(&problem, &moments.mean, settings);
    let path = variational::build_pseudo_path(&opt.x, model, obs_model, t0, t1, dt, subintervals)?;
    Ok(Solve {
        path,
        status: opt.status,
        iterations: opt.iterations,
        initial_cost,
        final_cost: opt.cost,
        x_opt: opt.x,
    })
}

/// One Var-nPF cycle from `ensemble.time` to `t_end`.
#[allow(clippy::too_many_arguments)]
pub fn var_npf_assimilation_cycle<M: SdeModel + ?Sized>(
    ensemble: &ParticleEnsemble,
    model: &M,
    obs_model: &ObservationModel,
    observation: &DVector<f64>,
    t_end: f64,
    nudging: &NudgingConfig,
    config: &VarNpfConfig,
    noise: &CycleNoise,
    options: CycleOptions,
) -> Result<(ParticleEnsemble, CycleDiagnostics)> {
    config.validate()?;
    nudging.validate()?;
    let clock = Instant::now();
    let dt = noise.paths.first().ok_or(FilterError::PathCount { expected: ensemble.len(), got: 0 })?.dt;
    let t0 = ensemble.time;
    let m = nudging.subintervals;
    let weights = ensemble.weights().to_vec();

    let var_clock = Instant::now();
    let first = solve_window(
        model,
        obs_model,
        ensemble.states(),
        &weights,
        observation,
        t0,
        t_end,
        dt,
        m,
        &config.variational,
    )?;
    let mut variational_secs = var_clock.elapsed().as_secs_f64();
    let terminal = first.path.pseudo_observations[m].clone();
    let per_sub = first.path.steps[1];
    let mut diag = VariationalDiagnostics {
        status: first.status,
        solves: 1,
        iterations: first.iterations,
        initial_cost: first.initial_cost,
        final_cost: first.final_cost,
        x_opt: first.x_opt.clone(),
        terminal_residual: (observation - &terminal).norm(),
    };
    let first_path = first.path;

    let reweight = match config.reweight_against {
        ReweightTarget::TrueObservation => observation.clone(),
        ReweightTarget::PseudoObservation => terminal,
    };

    let outcome = nudged_cycle(
        ensemble,
        model,
        obs_model,
        &reweight,
        t_end,
        nudging,
        noise,
        options,
        |j, start_step, states| {
            let target = if j == 0 || !config.resolve_per_subinterval {
                first_path.pseudo_observations[j + 1].clone()
            } else {
                let solve_clock = Instant::now();
                let t_j = t0 + start_step as f64 * dt;
                let s = solve_window(
                    model,
                    obs_model,
                    states,
                    &weights,
                    observation,
                    t_j,
                    t_end,
                    dt,
                    m - j,
                    &config.variational,
                )?;
                variational_secs += solve_clock.elapsed().as_secs_f64();
                diag.solves += 1;
                diag.iterations += s.iterations;
                s.path.pseudo_observations[1].clone()
            };
            Ok(SubintervalTarget {
                end_step: start_step + per_sub,
                target,
            })
        },
    )?;

    let mut cycle = outcome.diagnostics;
    cycle.variational = Some(diag);
    cycle.timing.variational_secs = variational_secs;
    cycle.timing.total_secs = clock.elapsed().as_secs_f64();
    Ok((outcome.ensemble, cycle))
}
