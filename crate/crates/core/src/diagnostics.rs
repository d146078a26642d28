//! Per-cycle bookkeeping shared by the three filters.

use nalgebra::DVector;

use crate::optimizer::OptimStatus;
use crate::sde::BrownianPath;
use crate::streams;

/// Randomness consumed by one assimilation cycle.
#[derive(Debug, Clone)]
pub struct CycleNoise {
    /// One path per particle slot covering the whole observation interval.
    pub paths: Vec<BrownianPath>,
    /// Uniform draw for systematic resampling.
    pub resample_draw: f64,
    /// Base seed of the Feynman-Kac realization streams, one stream per
    /// (particle, subinterval). Independent of `paths`.
    pub realization_seed: u64,
}

impl CycleNoise {
    /// Per-particle paths from `derive_seed(base, [slot])`.
    pub fn seeded(base: u64, particles: usize, dimension: usize, dt: f64, steps: usize) -> Self {
        let paths = (0..particles)
            .map(|i| BrownianPath::from_seed(streams::derive_seed(base, &[i as u64]), dimension, dt, steps))
            .collect();
        Self {
            paths,
            resample_draw: (streams::mix64(base ^ 0xA5A5) >> 11) as f64 / (1u64 << 53) as f64,
            realization_seed: streams::derive_seed(base, &[u64::MAX]),
        }
    }

    pub(crate) fn realization_stream(&self, particle: usize, subinterval: usize) -> u64 {
        streams::derive_seed(self.realization_seed, &[particle as u64, subinterval as u64])
    }
}

/// Options common to every filter cycle.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CycleOptions {
    /// Systematic resampling whenever `N_eff < N/2`.
    pub resample: bool,
}

impl Default for CycleOptions {
    fn default() -> Self {
        Self { resample: true }
    }
}

/// One particle's control solve on one subinterval.
#[derive(Debug, Clone, PartialEq)]
pub struct SubintervalRecord {
    pub particle: usize,
    pub subinterval: usize,
    /// `‖u‖₂` of the proposed control (before any rollback).
    pub control_norm: f64,
    pub rolled_back: bool,
    pub underflow: bool,
    pub realizations: usize,
    pub batches: usize,
    pub converged: bool,
    /// Integrator steps of every realization in this solve.
    pub horizon_steps: usize,
    pub realization_steps: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NudgingDiagnostics {
    pub subintervals: Vec<SubintervalRecord>,
    /// Per particle, per integrator step: `‖u dt‖ / ‖σ dW‖`; `None` on steps
    /// without applied control or with `σ dW = 0`.
    pub step_ratios: Vec<Vec<Option<f64>>>,
    /// Per particle, per integrator step: norm of the applied control.
    pub step_control_norms: Vec<Vec<f64>>,
    /// Log Radon-Nikodym factor accumulated by each particle.
    pub log_rn: Vec<f64>,
}

impl NudgingDiagnostics {
    pub fn rollbacks(&self) -> usize {
        self.subintervals.iter().filter(|s| s.rolled_back).count()
    }

    pub fn realization_steps(&self) -> usize {
        self.subintervals.iter().map(|s| s.realization_steps).sum()
    }

    pub fn max_batches(&self) -> usize {
        self.subintervals.iter().map(|s| s.batches).max().unwrap_or(0)
    }

    /// Associative merge of two diagnostics (e.g. from parallel workers).
    pub fn merge(mut self, other: Self) -> Self {
        self.subintervals.extend(other.subintervals);
        self.step_ratios.extend(other.step_ratios);
        self.step_control_norms.extend(other.step_control_norms);
        self.log_rn.extend(other.log_rn);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariationalDiagnostics {
    pub status: OptimStatus,
    pub solves: usize,
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub x_opt: DVector<f64>,
    /// `‖Y − Y†(t_{k+1})‖` of the first solve.
    pub terminal_residual: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CycleTiming {
    pub total_secs: f64,
    pub nudging_secs: f64,
    pub variational_secs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleDiagnostics {
    pub t_start: f64,
    pub t_end: f64,
    pub start_weights: Vec<f64>,
    /// Normalized weights at `t_end` before the Bayes update.
    pub prior_weights: Vec<f64>,
    /// Normalized weights after the Bayes update, before resampling.
    pub posterior_weights: Vec<f64>,
    pub prior_ness: f64,
    pub posterior_ness: f64,
    pub resampled: bool,
    pub resample_parents: Option<Vec<usize>>,
    pub collapsed: bool,
    pub failed_particles: Vec<usize>,
    /// Per particle, `steps + 1` states from `t_start` to `t_end`.
    pub trajectories: Vec<Vec<DVector<f64>>>,
    pub nudging: Option<NudgingDiagnostics>,
    pub variational: Option<VariationalDiagnostics>,
    pub timing: CycleTiming,
}

/// `‖u·dt‖ / ‖σ·dW‖`; `None` when the Brownian displacement vanishes.
pub fn compute_nudging_bm_ratio(
    control: &DVector<f64>,
    dw: &DVector<f64>,
    dt: f64,
    dispersion: &nalgebra::DMatrix<f64>,
) -> Option<f64> {
    let bm = (dispersion * dw).norm();
    (bm > 0.0).then(|| (control * dt).norm() / bm)
}
