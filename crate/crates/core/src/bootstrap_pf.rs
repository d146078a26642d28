//! Bootstrap particle filter cycle: advect under the signal dynamics,
//! reweight by the likelihood, resample when `N_eff < N/2`.

use std::time::Instant;

use nalgebra::DVector;

use crate::diagnostics::{CycleDiagnostics, CycleNoise, CycleOptions, CycleTiming};
use crate::ensemble::{self, normalize_log_weights, ObservationModel, ParticleEnsemble};
use crate::error::{FilterError, Result};
use crate::sde::{self, SdeError, SdeModel};

#[derive(Debug, Clone, Copy)]
pub(crate) struct CycleGrid {
    pub t_start: f64,
    pub t_end: f64,
    pub steps: usize,
    pub dt: f64,
}

pub(crate) fn cycle_grid(ensemble: &ParticleEnsemble, t_end: f64, noise: &CycleNoise) -> Result<CycleGrid> {
    if noise.paths.len() != ensemble.len() {
        return Err(FilterError::PathCount {
            expected: ensemble.len(),
            got: noise.paths.len(),
        });
    }
    let dt = noise.paths[0].dt;
    let steps = sde::step_count(ensemble.time, t_end, dt)?;
    if let Some(short) = noise.paths.iter().find(|p| p.len() < steps) {
        return Err(SdeError::PathTooShort {
            available: short.len(),
            required: steps,
        }
        .into());
    }
    Ok(CycleGrid {
        t_start: ensemble.time,
        t_end,
        steps,
        dt,
    })
}

/// Advances `trajectory.last()` over `dws`, appending every state. On
/// blow-up the trajectory is padded with its last finite state.
pub(crate) fn advance_steps<M: SdeModel + ?Sized>(
    model: &M,
    control: Option<&DVector<f64>>,
    dws: &[DVector<f64>],
    dt: f64,
    trajectory: &mut Vec<DVector<f64>>,
) -> std::result::Result<(), SdeError> {
    for (n, dw) in dws.iter().enumerate() {
        let current = trajectory.last().expect("trajectory starts with the initial state");
        match sde::integrate_step(model, current, control, dt, Some(dw)) {
            Ok(next) => trajectory.push(next),
            Err(_) => {
                let last = current.clone();
                trajectory.extend(std::iter::repeat_n(last, dws.len() - n));
                return Err(SdeError::NonFinite { step: n });
            }
        }
    }
    Ok(())
}

/// Bayes update with per-particle log factors, optional resampling, and the
/// common part of the diagnostics.
#[allow(clippy::too_many_arguments)]
pub(crate) fn complete_cycle(
    start: &ParticleEnsemble,
    grid: CycleGrid,
    trajectories: Vec<Vec<DVector<f64>>>,
    failed: &[bool],
    mut log_factors: Vec<f64>,
    observation: &DVector<f64>,
    obs_model: &ObservationModel,
    noise: &CycleNoise,
    options: CycleOptions,
) -> Result<(ParticleEnsemble, CycleDiagnostics)> {
    for (lf, &f) in log_factors.iter_mut().zip(failed) {
        if f {
            *lf = f64::NEG_INFINITY;
        }
    }
    let end_states: Vec<DVector<f64>> = trajectories
        .iter()
        .map(|t| t.last().expect("non-empty trajectory").clone())
        .collect();

    let prior_log: Vec<f64> = start
        .weights()
        .iter()
        .zip(&log_factors)
        .map(|(&w, &c)| if w > 0.0 { w.ln() + c } else { f64::NEG_INFINITY })
        .collect();
    let n = start.len();
    let prior_weights = normalize_log_weights(&prior_log).unwrap_or_else(|| vec![1.0 / n as f64; n]);
    let prior_ness = ensemble::effective_sample_size(&prior_weights)? / n as f64;

    let advected = ParticleEnsemble::new(end_states, start.weights().to_vec(), grid.t_end)?;
    let (posterior, outcome) = ensemble::bayes_reweight(&advected, observation, obs_model, &log_factors)?;
    let posterior_weights = posterior.weights().to_vec();
    let posterior_ness = posterior.normalized_ess();

    let (out, parents) = if options.resample && ensemble::needs_resampling(&posterior) {
        let (r, idx) = ensemble::systematic_resample(&posterior, noise.resample_draw)?;
        (r, Some(idx))
    } else {
        (posterior, None)
    };

    let diag = CycleDiagnostics {
        t_start: grid.t_start,
        t_end: grid.t_end,
        start_weights: start.weights().to_vec(),
        prior_weights,
        posterior_weights,
        prior_ness,
        posterior_ness,
        resampled: parents.is_some(),
        resample_parents: parents,
        collapsed: outcome.collapsed,
        failed_particles: failed.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i).collect(),
        trajectories,
        nudging: None,
        variational: None,
        timing: CycleTiming::default(),
    };
    Ok((out, diag))
}

/// One bootstrap cycle from `ensemble.time` to `t_end`, with observation
/// `observation` at `t_end`.
pub fn pf_assimilation_cycle<M: SdeModel + ?Sized>(
    ensemble: &ParticleEnsemble,
    model: &M,
    obs_model: &ObservationModel,
    observation: &DVector<f64>,
    t_end: f64,
    noise: &CycleNoise,
    options: CycleOptions,
) -> Result<(ParticleEnsemble, CycleDiagnostics)> {
    let clock = Instant::now();
    let grid = cycle_grid(ensemble, t_end, noise)?;
    let mut failed = vec![false; ensemble.len()];
    let trajectories: Vec<Vec<DVector<f64>>> = ensemble
        .states()
        .iter()
        .zip(&noise.paths)
        .zip(failed.iter_mut())
        .map(|((x, path), fail)| {
            let mut traj = Vec::with_capacity(grid.steps + 1);
            traj.push(x.clone());
            *fail = advance_steps(model, None, &path.increments[..grid.steps], grid.dt, &mut traj).is_err();
            traj
        })
        .collect();
    let log_factors = vec![0.0; ensemble.len()];
    let (out, mut diag) = complete_cycle(
        ensemble,
        grid,
        trajectories,
        &failed,
        log_factors,
        observation,
        obs_model,
        noise,
        options,
    )?;
    diag.timing.total_secs = clock.elapsed().as_secs_f64();
    Ok((out, diag))
}
