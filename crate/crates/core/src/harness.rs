//! Twin experiments: truth and observation generation, filter runs, metrics,
//! Monte Carlo sweeps and CSV/JSON persistence.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap_pf::pf_assimilation_cycle;
use crate::diagnostics::{CycleDiagnostics, CycleNoise, CycleOptions};
use crate::ensemble::{self, ObservationModel, ParticleEnsemble};
use crate::error::{FilterError, Result};
use crate::nudging::{npf_assimilation_cycle, NudgingConfig};
use crate::sde::{self, BrownianPath, ControlSchedule, L63Params, Lorenz63};
use crate::streams::{self, StreamTag, SHARED_FILTER_TAG};
use crate::var_npf::{var_npf_assimilation_cycle, VarNpfConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    Pf,
    Npf,
    VarNpf,
}

impl FilterKind {
    pub const ALL: [FilterKind; 3] = [FilterKind::Pf, FilterKind::Npf, FilterKind::VarNpf];

    pub fn name(self) -> &'static str {
        match self {
            FilterKind::Pf => "pf",
            FilterKind::Npf => "npf",
            FilterKind::VarNpf => "var_npf",
        }
    }

    fn tag(self) -> u64 {
        match self {
            FilterKind::Pf => 1,
            FilterKind::Npf => 2,
            FilterKind::VarNpf => 3,
        }
    }
}

impl std::fmt::Display for FilterKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FilterKind {
    type Err = FilterError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pf" => Ok(FilterKind::Pf),
            "npf" => Ok(FilterKind::Npf),
            "var_npf" | "var-npf" => Ok(FilterKind::VarNpf),
            other => Err(FilterError::Config(format!("unknown filter `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
    /// Diffusion matrix `R = σσᵀ`.
    pub diffusion: [[f64; 3]; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        let p = L63Params::default();
        Self {
            alpha: p.alpha,
            gamma: p.gamma,
            beta: p.beta,
            diffusion: [[2.0, 1.0, 0.5], [1.0, 2.0, 1.0], [0.5, 1.0, 2.0]],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObservationConfig {
    pub operator: [[f64; 3]; 3],
    pub noise_covariance: [[f64; 3]; 3],
}

impl ModelConfig {
    pub fn params(&self) -> L63Params {
        L63Params {
            alpha: self.alpha,
            gamma: self.gamma,
            beta: self.beta,
        }
    }
}

impl Default for ObservationConfig {
    fn default() -> Self {
        Self {
            operator: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            noise_covariance: [[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0]],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    /// Defaults to the truth's initial state.
    pub mean: Option<[f64; 3]>,
    /// Isotropic variance of the initial ensemble.
    pub variance: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            mean: None,
            variance: 2.0,
        }
    }
}

pub const DEFAULT_TRUTH_INITIAL: [f64; 3] = [1.508870, -1.531271, 25.46091];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub filter: FilterKind,
    pub particles: usize,
    pub obs_interval: f64,
    pub final_time: f64,
    pub dt: f64,
    pub truth_initial: [f64; 3],
    pub seed: u64,
    pub resample: bool,
    pub ensemble: EnsembleConfig,
    pub model: ModelConfig,
    pub observation: ObservationConfig,
    pub nudging: NudgingConfig,
    pub var_npf: VarNpfConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            filter: FilterKind::VarNpf,
            particles: 10,
            obs_interval: 0.5,
            final_time: 3.5,
            dt: 0.01,
            truth_initial: DEFAULT_TRUTH_INITIAL,
            seed: 0,
            resample: true,
            ensemble: EnsembleConfig::default(),
            model: ModelConfig::default(),
            observation: ObservationConfig::default(),
            nudging: NudgingConfig::default(),
            var_npf: VarNpfConfig::default(),
        }
    }
}

fn matrix(rows: &[[f64; 3]; 3]) -> DMatrix<f64> {
    DMatrix::from_fn(3, 3, |i, j| rows[i][j])
}

fn integer_ratio(num: f64, den: f64) -> Option<usize> {
    let r = num / den;
    let k = r.round();
    (k >= 1.0 && (r - k).abs() <= 1e-9 * k.max(1.0)).then_some(k as usize)
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FilterError::Config(m));
        if self.particles == 0 {
            return bad("particles must be >= 1".into());
        }
        if !(self.dt > 0.0) || !(self.obs_interval > 0.0) || !(self.final_time > 0.0) {
            return bad("dt, obs_interval and final_time must be positive".into());
        }
        let Some(per_obs) = integer_ratio(self.obs_interval, self.dt) else {
            return bad(format!("obs_interval {} is not a multiple of dt {}", self.obs_interval, self.dt));
        };
        if integer_ratio(self.final_time, self.obs_interval).is_none() {
            return bad(format!(
                "final_time {} is not a multiple of obs_interval {}",
                self.final_time, self.obs_interval
            ));
        }
        if per_obs % self.nudging.subintervals != 0 {
            return bad(format!(
                "{per_obs} steps per observation interval do not split into {} subintervals",
                self.nudging.subintervals
            ));
        }
        if !(self.ensemble.variance >= 0.0) {
            return bad("ensemble.variance must be >= 0".into());
        }
        self.nudging.validate()?;
        self.var_npf.validate()?;
        self.model()?;
        self.observation_model()?;
        Ok(())
    }

    pub fn model(&self) -> Result<Lorenz63> {
        Ok(Lorenz63::new(self.model.params(), &matrix(&self.model.diffusion))?)
    }

    pub fn observation_model(&self) -> Result<ObservationModel> {
        Ok(ObservationModel::new(
            matrix(&self.observation.operator),
            matrix(&self.observation.noise_covariance),
        )?)
    }

    pub fn steps_per_observation(&self) -> usize {
        integer_ratio(self.obs_interval, self.dt).unwrap_or(0)
    }

    pub fn observation_count(&self) -> usize {
        integer_ratio(self.final_time, self.obs_interval).unwrap_or(0)
    }

    pub fn ensemble_mean(&self) -> [f64; 3] {
        self.ensemble.mean.unwrap_or(self.truth_initial)
    }
}

/// Truth trajectory on the integrator grid and observations at every
/// multiple of the observation interval (excluding `t = 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct TruthRun {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub observation_times: Vec<f64>,
    pub observations: Vec<DVector<f64>>,
    pub generation_secs: f64,
}

impl TruthRun {
    /// Fingerprint of the observation sequence.
    pub fn hash(&self) -> u64 {
        streams::fingerprint(
            self.observation_times
                .iter()
                .copied()
                .chain(self.observations.iter().flat_map(|y| y.iter().copied())),
        )
    }
}

pub fn generate_truth_and_observations(config: &ExperimentConfig, seed: u64) -> Result<TruthRun> {
    let clock = Instant::now();
    let model = config.model()?;
    let per_obs = config.steps_per_observation();
    let total = per_obs * config.observation_count();
    let path = BrownianPath::from_seed(
        streams::derive_seed(seed, &[SHARED_FILTER_TAG, StreamTag::Truth as u64]),
        3,
        config.dt,
        total,
    );
    let x0 = DVector::from_column_slice(&config.truth_initial);
    let t_end = total as f64 * config.dt;
    let traj = sde::integrate_path(&model, &x0, &ControlSchedule::uncontrolled(), &path, 0.0, t_end)
        .map_err(FilterError::Truth)?;

    let operator = matrix(&config.observation.operator);
    let noise_factor = sde::dispersion_from_diffusion(&matrix(&config.observation.noise_covariance))?;
    let mut rng = streams::stream_rng(streams::derive_seed(seed, &[SHARED_FILTER_TAG, StreamTag::Observation as u64]));
    let mut observation_times = Vec::new();
    let mut observations = Vec::new();
    for k in 1..=config.observation_count() {
        let s = k * per_obs;
        let z = DVector::from_iterator(operator.nrows(), (0..operator.nrows()).map(|_| StandardNormal.sample(&mut rng)));
        observations.push(&operator * &traj.states[s] + &noise_factor * z);
        observation_times.push(traj.time(s));
    }
    Ok(TruthRun {
        times: (0..=total).map(|s| traj.time(s)).collect(),
        states: traj.states,
        observation_times,
        observations,
        generation_secs: clock.elapsed().as_secs_f64(),
    })
}

pub fn sample_initial_ensemble(config: &ExperimentConfig, seed: u64) -> Result<ParticleEnsemble> {
    let mut rng = streams::stream_rng(streams::derive_seed(seed, &[SHARED_FILTER_TAG, StreamTag::InitialEnsemble as u64]));
    let mean = config.ensemble_mean();
    let sd = config.ensemble.variance.sqrt();
    let states = (0..config.particles)
        .map(|_| {
            DVector::from_iterator(
                3,
                mean.iter().map(|m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + sd * z
                }),
            )
        })
        .collect();
    Ok(ParticleEnsemble::uniform(states, 0.0)?)
}

/// Noise of cycle `k`: propagation paths and the resampling draw are shared
/// by all filters; the realization streams are filter specific.
pub fn cycle_noise(config: &ExperimentConfig, seed: u64, filter: FilterKind, cycle: usize) -> CycleNoise {
    let base = streams::derive_seed(seed, &[SHARED_FILTER_TAG, StreamTag::Propagation as u64, cycle as u64]);
    let mut noise = CycleNoise::seeded(base, config.particles, 3, config.dt, config.steps_per_observation());
    noise.resample_draw = {
        let r = streams::derive_seed(seed, &[SHARED_FILTER_TAG, StreamTag::Resample as u64, cycle as u64]);
        (r >> 11) as f64 / (1u64 << 53) as f64
    };
    noise.realization_seed = streams::derive_seed(seed, &[filter.tag(), StreamTag::Realization as u64, cycle as u64]);
    noise
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub avg_rmse: f64,
    /// Mean posterior nESS over the observation times.
    pub avg_ness: f64,
    pub avg_prior_ness: f64,
    /// Mean applied `‖u‖` over particles and integrator steps.
    pub control_mean: Option<f64>,
    pub control_max: Option<f64>,
    /// Fraction of control solves replaced by zero control.
    pub rollback_fraction: Option<f64>,
    pub ratio_mean: Option<f64>,
    pub ratio_max: Option<f64>,
    pub max_batches: Option<usize>,
    pub realization_steps: Option<usize>,
    pub resamples: usize,
    pub runtime_secs: f64,
    pub nudging_secs: f64,
    pub variational_secs: f64,
}

impl RunMetrics {
    pub fn variational_share(&self) -> f64 {
        if self.runtime_secs > 0.0 {
            self.variational_secs / self.runtime_secs
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRecord {
    pub filter: FilterKind,
    pub seed: u64,
    pub truth: TruthRun,
    pub truth_hash: u64,
    /// Weighted ensemble mean on the integrator grid.
    pub estimate: Vec<DVector<f64>>,
    pub initial_ensemble: ParticleEnsemble,
    pub cycles: Vec<CycleDiagnostics>,
    pub metrics: RunMetrics,
}

/// Weighted mean on the integrator grid: start-of-cycle weights inside each
/// cycle, posterior weights at the observation times.
pub fn ensemble_mean_path(initial: &ParticleEnsemble, cycles: &[CycleDiagnostics]) -> Vec<DVector<f64>> {
    let mut path = vec![ensemble::weighted_mean(initial.states(), initial.weights())];
    for c in cycles {
        let steps = c.trajectories.first().map_or(0, |t| t.len() - 1);
        for s in 1..=steps {
            let states: Vec<DVector<f64>> = c.trajectories.iter().map(|t| t[s].clone()).collect();
            let w = if s == steps { &c.posterior_weights } else { &c.start_weights };
            path.push(ensemble::weighted_mean(&states, w));
        }
    }
    path
}

/// Root mean square over grid points and components.
pub fn rmse(estimate: &[DVector<f64>], truth: &[DVector<f64>]) -> f64 {
    let (sum, count) = estimate
        .iter()
        .zip(truth)
        .fold((0.0, 0usize), |(s, c), (e, t)| (s + (e - t).norm_squared(), c + e.len()));
    (sum / count as f64).sqrt()
}

pub fn compute_rmse(record: &ExperimentRecord) -> f64 {
    rmse(&record.estimate, &record.truth.states)
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn fold_max(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    values.into_iter().fold(None, |m, v| Some(m.map_or(v, |m: f64| m.max(v))))
}

fn summarize_run(filter: FilterKind, estimate: &[DVector<f64>], truth: &TruthRun, cycles: &[CycleDiagnostics]) -> RunMetrics {
    let nudged: Vec<_> = cycles.iter().filter_map(|c| c.nudging.as_ref()).collect();
    let has_nudging = filter != FilterKind::Pf && !nudged.is_empty();
    let norms = || nudged.iter().flat_map(|d| d.step_control_norms.iter().flatten().copied());
    let ratios = || nudged.iter().flat_map(|d| d.step_ratios.iter().flatten().filter_map(|r| *r));
    let solves: usize = nudged.iter().map(|d| d.subintervals.len()).sum();
    let rollbacks: usize = nudged.iter().map(|d| d.rollbacks()).sum();
    let opt = |v: Option<f64>| if has_nudging { v } else { None };
    RunMetrics {
        avg_rmse: rmse(estimate, &truth.states),
        avg_ness: mean(cycles.iter().map(|c| c.posterior_ness)).unwrap_or(f64::NAN),
        avg_prior_ness: mean(cycles.iter().map(|c| c.prior_ness)).unwrap_or(f64::NAN),
        control_mean: opt(mean(norms())),
        control_max: opt(fold_max(norms())),
        rollback_fraction: opt((solves > 0).then(|| rollbacks as f64 / solves as f64)),
        ratio_mean: opt(mean(ratios())),
        ratio_max: opt(fold_max(ratios())),
        max_batches: has_nudging.then(|| nudged.iter().map(|d| d.max_batches()).max().unwrap_or(0)),
        realization_steps: has_nudging.then(|| nudged.iter().map(|d| d.realization_steps()).sum()),
        resamples: cycles.iter().filter(|c| c.resampled).count(),
        runtime_secs: cycles.iter().map(|c| c.timing.total_secs).sum(),
        nudging_secs: cycles.iter().map(|c| c.timing.nudging_secs).sum(),
        variational_secs: cycles.iter().map(|c| c.timing.variational_secs).sum(),
    }
}

/// Runs `filter` against a given truth. The seed selects the shared initial
/// ensemble and propagation noise.
pub fn run_filter(config: &ExperimentConfig, filter: FilterKind, seed: u64, truth: &TruthRun) -> Result<ExperimentRecord> {
    config.validate()?;
    let model = config.model()?;
    let obs_model = config.observation_model()?;
    let options = CycleOptions { resample: config.resample };
    let initial = sample_initial_ensemble(config, seed)?;
    let mut current = initial.clone();
    let mut cycles = Vec::with_capacity(truth.observations.len());
    for (k, (y, &t)) in truth.observations.iter().zip(&truth.observation_times).enumerate() {
        let noise = cycle_noise(config, seed, filter, k);
        let (next, diag) = match filter {
            FilterKind::Pf => pf_assimilation_cycle(&current, &model, &obs_model, y, t, &noise, options)?,
            FilterKind::Npf => {
                npf_assimilation_cycle(&current, &model, &obs_model, y, t, &config.nudging, &noise, options)?
            }
            FilterKind::VarNpf => var_npf_assimilation_cycle(
                &current,
                &model,
                &obs_model,
                y,
                t,
                &config.nudging,
                &config.var_npf,
                &noise,
                options,
            )?,
        };
        current = next;
        cycles.push(diag);
    }
    let estimate = ensemble_mean_path(&initial, &cycles);
    let metrics = summarize_run(filter, &estimate, truth, &cycles);
    Ok(ExperimentRecord {
        filter,
        seed,
        truth_hash: truth.hash(),
        truth: truth.clone(),
        estimate,
        initial_ensemble: initial,
        cycles,
        metrics,
    })
}

/// Truth generation plus one run of `config.filter`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentRecord> {
    config.validate()?;
    let truth = generate_truth_and_observations(config, config.seed)?;
    run_filter(config, config.filter, config.seed, &truth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialCondition {
    pub label: String,
    pub mean: [f64; 3],
}

/// The star condition followed by ten further ensemble means.
pub fn default_initial_conditions() -> Vec<InitialCondition> {
    let means: [[f64; 3]; 11] = [
        [1.509, -1.531, 25.461],
        [-3.622, 2.487, 29.784],
        [-8.587, -14.288, 16.895],
        [-14.411, -8.058, 40.440],
        [14.418, 11.236, 37.915],
        [4.133, 6.815, 14.316],
        [-2.895, -5.123, 11.843],
        [-5.802, -7.589, 20.507],
        [10.347, 17.701, 17.250],
        [3.072, -0.052, 26.056],
        [1.909, -0.842, 24.846],
    ];
    means
        .iter()
        .enumerate()
        .map(|(i, m)| InitialCondition {
            label: if i == 0 { "star".into() } else { i.to_string() },
            mean: *m,
        })
        .collect()
}

/// `all`, `star`, or a comma separated list of labels (`star,1,7`).
pub fn parse_ic_selection(text: &str) -> Result<Vec<InitialCondition>> {
    let all = default_initial_conditions();
    match text.trim() {
        "all" => Ok(all),
        list => list
            .split(',')
            .map(|item| {
                let item = item.trim();
                all.iter()
                    .find(|ic| ic.label == item)
                    .cloned()
                    .ok_or_else(|| FilterError::Config(format!("unknown initial condition `{item}`")))
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub ic_index: usize,
    pub ic_label: String,
    pub run: usize,
    pub filter: FilterKind,
    pub seed: u64,
    pub truth_hash: u64,
    pub metrics: Option<RunMetrics>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub ic_index: usize,
    pub ic_label: String,
    pub filter: FilterKind,
    pub runs: usize,
    pub failures: usize,
    pub avg_rmse: f64,
    pub avg_ness: f64,
    pub avg_runtime_secs: f64,
    pub median_rmse: f64,
    pub median_ness: f64,
    pub ratio_mean: Option<f64>,
    pub control_mean: Option<f64>,
    pub rollback_fraction: Option<f64>,
    pub variational_share: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub base_seed: u64,
    pub runs_per_ic: usize,
    pub rows: Vec<SummaryRow>,
    pub runs: Vec<RunRow>,
}

impl McSummary {
    pub fn row(&self, ic_index: usize, filter: FilterKind) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.ic_index == ic_index && r.filter == filter)
    }

    pub fn completed(&self, ic_index: usize, filter: FilterKind) -> impl Iterator<Item = &RunMetrics> {
        self.runs
            .iter()
            .filter(move |r| r.ic_index == ic_index && r.filter == filter)
            .filter_map(|r| r.metrics.as_ref())
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn summary_rows(runs: &[RunRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(usize, FilterKind), Vec<&RunRow>> = BTreeMap::new();
    for r in runs {
        groups.entry((r.ic_index, r.filter)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((ic_index, filter), rows)| {
            let done: Vec<&RunMetrics> = rows.iter().filter_map(|r| r.metrics.as_ref()).collect();
            let col = |f: fn(&RunMetrics) -> f64| done.iter().map(|m| f(m)).collect::<Vec<_>>();
            let opt_mean = |f: fn(&RunMetrics) -> Option<f64>| mean(done.iter().filter_map(|m| f(m)));
            SummaryRow {
                ic_index,
                ic_label: rows[0].ic_label.clone(),
                filter,
                runs: done.len(),
                failures: rows.len() - done.len(),
                avg_rmse: mean(col(|m| m.avg_rmse)).unwrap_or(f64::NAN),
                avg_ness: mean(col(|m| m.avg_ness)).unwrap_or(f64::NAN),
                avg_runtime_secs: mean(col(|m| m.runtime_secs)).unwrap_or(f64::NAN),
                median_rmse: median(&col(|m| m.avg_rmse)),
                median_ness: median(&col(|m| m.avg_ness)),
                ratio_mean: opt_mean(|m| m.ratio_mean),
                control_mean: opt_mean(|m| m.control_mean),
                rollback_fraction: opt_mean(|m| m.rollback_fraction),
                variational_share: (filter == FilterKind::VarNpf)
                    .then(|| mean(col(|m| m.variational_share())))
                    .flatten(),
            }
        })
        .collect()
}

/// For every IC and run index: one truth, one initial ensemble draw and one
/// set of propagation paths, shared by all `filters`. Truth starts at the
/// IC's mean. `jobs = None` uses the global rayon pool.
pub fn run_monte_carlo(
    template: &ExperimentConfig,
    initial_conditions: &[InitialCondition],
    runs_per_ic: usize,
    base_seed: u64,
    filters: &[FilterKind],
    jobs: Option<usize>,
) -> Result<McSummary> {
    if runs_per_ic == 0 {
        return Err(FilterError::Config("runs per initial condition must be >= 1".into()));
    }
    template.validate()?;
    let tasks: Vec<(usize, usize)> = (0..initial_conditions.len())
        .flat_map(|ic| (0..runs_per_ic).map(move |r| (ic, r)))
        .collect();
    let work = |&(ic, run): &(usize, usize)| -> Vec<RunRow> {
        let cond = &initial_conditions[ic];
        let mut cfg = template.clone();
        cfg.truth_initial = cond.mean;
        cfg.ensemble.mean = Some(cond.mean);
        let seed = streams::derive_seed(base_seed, &[ic as u64, run as u64]);
        cfg.seed = seed;
        let row = |filter, truth_hash, outcome: Result<RunMetrics>| RunRow {
            ic_index: ic,
            ic_label: cond.label.clone(),
            run,
            filter,
            seed,
            truth_hash,
            error: outcome.as_ref().err().map(|e| e.to_string()),
            metrics: outcome.ok(),
        };
        match generate_truth_and_observations(&cfg, seed) {
            Ok(truth) => filters
                .iter()
                .map(|&f| {
                    let outcome = run_filter(&cfg, f, seed, &truth).map(|r| r.metrics);
                    row(f, truth.hash(), outcome)
                })
                .collect(),
            Err(e) => {
                let msg = e.to_string();
                filters
                    .iter()
                    .map(|&f| row(f, 0, Err(FilterError::Config(msg.clone()))))
                    .collect()
            }
        }
    };
    let nested: Vec<Vec<RunRow>> = match jobs {
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j.max(1))
            .build()
            .map_err(|e| FilterError::Config(format!("thread pool: {e}")))?
            .install(|| tasks.par_iter().map(work).collect()),
        None => tasks.par_iter().map(work).collect(),
    };
    let runs: Vec<RunRow> = nested.into_iter().flatten().collect();
    Ok(McSummary {
        base_seed,
        runs_per_ic,
        rows: summary_rows(&runs),
        runs,
    })
}

/// 17 significant digits.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn format_opt(x: Option<f64>) -> String {
    x.map(format_f64).unwrap_or_default()
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim().parse().map_err(|_| FilterError::Parse(format!("bad number `{s}`")))
}

fn parse_opt<T: FromStr>(s: &str) -> Result<Option<T>> {
    if s.trim().is_empty() {
        Ok(None)
    } else {
        s.trim().parse().map(Some).map_err(|_| FilterError::Parse(format!("bad value `{s}`")))
    }
}

/// One long-format observation of a time series.
#[derive(Debug, Clone, PartialEq)]
pub struct TidyRow {
    pub filter: String,
    pub series: String,
    pub time: f64,
    pub particle: Option<usize>,
    pub component: Option<usize>,
    pub value: f64,
}

const TIDY_HEADER: [&str; 6] = ["filter", "series", "time", "particle", "component", "value"];

pub fn record_rows(record: &ExperimentRecord) -> Vec<TidyRow> {
    let f = record.filter.name().to_string();
    let mut rows = Vec::new();
    let mut push = |series: &str, time: f64, particle: Option<usize>, component: Option<usize>, value: f64| {
        rows.push(TidyRow {
            filter: f.clone(),
            series: series.into(),
            time,
            particle,
            component,
            value,
        })
    };
    let times = &record.truth.times;
    for (s, (x, e)) in record.truth.states.iter().zip(&record.estimate).enumerate() {
        for c in 0..x.len() {
            push("truth", times[s], None, Some(c), x[c]);
            push("estimate", times[s], None, Some(c), e[c]);
        }
    }
    for (t, y) in record.truth.observation_times.iter().zip(&record.truth.observations) {
        for c in 0..y.len() {
            push("observation", *t, None, Some(c), y[c]);
        }
    }
    for (i, x) in record.initial_ensemble.states().iter().enumerate() {
        for c in 0..x.len() {
            push("particle", 0.0, Some(i), Some(c), x[c]);
        }
    }
    let mut offset = 0;
    for cycle in &record.cycles {
        let steps = cycle.trajectories.first().map_or(0, |t| t.len() - 1);
        for (i, traj) in cycle.trajectories.iter().enumerate() {
            for (s, x) in traj.iter().enumerate().skip(1) {
                for c in 0..x.len() {
                    push("particle", times[offset + s], Some(i), Some(c), x[c]);
                }
            }
            push("weight_prior", cycle.t_end, Some(i), None, cycle.prior_weights[i]);
            push("weight_posterior", cycle.t_end, Some(i), None, cycle.posterior_weights[i]);
        }
        push("ness_prior", cycle.t_end, None, None, cycle.prior_ness);
        push("ness_posterior", cycle.t_end, None, None, cycle.posterior_ness);
        if let Some(n) = &cycle.nudging {
            for i in 0..n.step_control_norms.len() {
                for s in 0..n.step_control_norms[i].len() {
                    let t = times[offset + s];
                    push("control_norm", t, Some(i), None, n.step_control_norms[i][s]);
                    if let Some(r) = n.step_ratios[i][s] {
                        push("nudging_bm_ratio", t, Some(i), None, r);
                    }
                }
            }
            let m = n.subintervals.iter().map(|s| s.subinterval + 1).max().unwrap_or(1);
            for sub in &n.subintervals {
                let t = times[offset + sub.subinterval * (steps / m)];
                push("rollback", t, Some(sub.particle), None, if sub.rolled_back { 1.0 } else { 0.0 });
            }
        }
        offset += steps;
    }
    rows
}

pub fn write_tidy<W: std::io::Write>(writer: W, rows: &[TidyRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(TIDY_HEADER)?;
    for r in rows {
        let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record([
            r.filter.clone(),
            r.series.clone(),
            format_f64(r.time),
            opt(r.particle),
            opt(r.component),
            format_f64(r.value),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tidy<R: std::io::Read>(reader: R) -> Result<Vec<TidyRow>> {
    let mut rd = csv::Reader::from_reader(reader);
    if rd.headers()?.iter().ne(TIDY_HEADER) {
        return Err(FilterError::Parse("unexpected record.csv header".into()));
    }
    rd.records()
        .map(|rec| {
            let rec = rec?;
            Ok(TidyRow {
                filter: rec[0].to_string(),
                series: rec[1].to_string(),
                time: parse_f64(&rec[2])?,
                particle: parse_opt(&rec[3])?,
                component: parse_opt(&rec[4])?,
                value: parse_f64(&rec[5])?,
            })
        })
        .collect()
}

const RUN_HEADER: [&str; 22] = [
    "ic_index",
    "ic_label",
    "run",
    "filter",
    "seed",
    "truth_hash",
    "status",
    "avg_rmse",
    "avg_ness",
    "avg_prior_ness",
    "control_mean",
    "control_max",
    "rollback_fraction",
    "ratio_mean",
    "ratio_max",
    "max_batches",
    "realization_steps",
    "resamples",
    "runtime_secs",
    "nudging_secs",
    "variational_secs",
    "error",
];

pub fn write_runs<W: std::io::Write>(writer: W, runs: &[RunRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(RUN_HEADER)?;
    for r in runs {
        let mut rec = vec![
            r.ic_index.to_string(),
            r.ic_label.clone(),
            r.run.to_string(),
            r.filter.name().to_string(),
            r.seed.to_string(),
            r.truth_hash.to_string(),
            if r.metrics.is_some() { "ok" } else { "failed" }.to_string(),
        ];
        match &r.metrics {
            Some(m) => rec.extend([
                format_f64(m.avg_rmse),
                format_f64(m.avg_ness),
                format_f64(m.avg_prior_ness),
                format_opt(m.control_mean),
                format_opt(m.control_max),
                format_opt(m.rollback_fraction),
                format_opt(m.ratio_mean),
                format_opt(m.ratio_max),
                m.max_batches.map(|b| b.to_string()).unwrap_or_default(),
                m.realization_steps.map(|b| b.to_string()).unwrap_or_default(),
                m.resamples.to_string(),
                format_f64(m.runtime_secs),
                format_f64(m.nudging_secs),
                format_f64(m.variational_secs),
            ]),
            None => rec.extend(std::iter::repeat_n(String::new(), 14)),
        }
        rec.push(r.error.clone().unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_runs<R: std::io::Read>(reader: R) -> Result<Vec<RunRow>> {
    let mut rd = csv::Reader::from_reader(reader);
    if rd.headers()?.iter().ne(RUN_HEADER) {
        return Err(FilterError::Parse("unexpected runs.csv header".into()));
    }
    let int = |s: &str| s.parse::<u64>().map_err(|_| FilterError::Parse(format!("bad integer `{s}`")));
    rd.records()
        .map(|rec| {
            let rec = rec?;
            let metrics = if &rec[6] == "ok" {
                Some(RunMetrics {
                    avg_rmse: parse_f64(&rec[7])?,
                    avg_ness: parse_f64(&rec[8])?,
                    avg_prior_ness: parse_f64(&rec[9])?,
                    control_mean: parse_opt(&rec[10])?,
                    control_max: parse_opt(&rec[11])?,
                    rollback_fraction: parse_opt(&rec[12])?,
                    ratio_mean: parse_opt(&rec[13])?,
                    ratio_max: parse_opt(&rec[14])?,
                    max_batches: parse_opt(&rec[15])?,
                    realization_steps: parse_opt(&rec[16])?,
                    resamples: int(&rec[17])? as usize,
                    runtime_secs: parse_f64(&rec[18])?,
                    nudging_secs: parse_f64(&rec[19])?,
                    variational_secs: parse_f64(&rec[20])?,
                })
            } else {
                None
            };
            Ok(RunRow {
                ic_index: int(&rec[0])? as usize,
                ic_label: rec[1].to_string(),
                run: int(&rec[2])? as usize,
                filter: rec[3].parse()?,
                seed: int(&rec[4])?,
                truth_hash: int(&rec[5])?,
                metrics,
                error: (!rec[21].is_empty()).then(|| rec[21].to_string()),
            })
        })
        .collect()
}

const SUMMARY_HEADER: [&str; 14] = [
    "ic_index",
    "ic_label",
    "filter",
    "runs",
    "failures",
    "avg_rmse",
    "avg_ness",
    "avg_runtime_secs",
    "median_rmse",
    "median_ness",
    "ratio_mean",
    "control_mean",
    "rollback_fraction",
    "variational_share",
];

pub fn write_summary<W: std::io::Write>(writer: W, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        w.write_record([
            r.ic_index.to_string(),
            r.ic_label.clone(),
            r.filter.name().to_string(),
            r.runs.to_string(),
            r.failures.to_string(),
            format_f64(r.avg_rmse),
            format_f64(r.avg_ness),
            format_f64(r.avg_runtime_secs),
            format_f64(r.median_rmse),
            format_f64(r.median_ness),
            format_opt(r.ratio_mean),
            format_opt(r.control_mean),
            format_opt(r.rollback_fraction),
            format_opt(r.variational_share),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary<R: std::io::Read>(reader: R) -> Result<Vec<SummaryRow>> {
    let mut rd = csv::Reader::from_reader(reader);
    if rd.headers()?.iter().ne(SUMMARY_HEADER) {
        return Err(FilterError::Parse("unexpected summary.csv header".into()));
    }
    let int = |s: &str| s.parse::<usize>().map_err(|_| FilterError::Parse(format!("bad integer `{s}`")));
    rd.records()
        .map(|rec| {
            let rec = rec?;
            Ok(SummaryRow {
                ic_index: int(&rec[0])?,
                ic_label: rec[1].to_string(),
                filter: rec[2].parse()?,
                runs: int(&rec[3])?,
                failures: int(&rec[4])?,
                avg_rmse: parse_f64(&rec[5])?,
                avg_ness: parse_f64(&rec[6])?,
                avg_runtime_secs: parse_f64(&rec[7])?,
                median_rmse: parse_f64(&rec[8])?,
                median_ness: parse_f64(&rec[9])?,
                ratio_mean: parse_opt(&rec[10])?,
                control_mean: parse_opt(&rec[11])?,
                rollback_fraction: parse_opt(&rec[12])?,
                variational_share: parse_opt(&rec[13])?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config: ExperimentConfig,
    pub filters: Vec<FilterKind>,
    pub base_seed: u64,
    pub runs_per_ic: Option<usize>,
    pub initial_conditions: Vec<InitialCondition>,
    pub truth_hashes: Vec<u64>,
    pub truth_secs: f64,
    pub wall_secs: f64,
    pub failures: usize,
}

impl Manifest {
    pub fn new(command: &str, config: &ExperimentConfig, filters: &[FilterKind], base_seed: u64) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: config.clone(),
            filters: filters.to_vec(),
            base_seed,
            runs_per_ic: None,
            initial_conditions: Vec::new(),
            truth_hashes: Vec::new(),
            truth_secs: 0.0,
            wall_secs: 0.0,
            failures: 0,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Single-run summary rows, one per filter record, all with `run = 0`.
pub fn single_run_rows(records: &[ExperimentRecord], label: &str) -> Vec<RunRow> {
    records
        .iter()
        .map(|r| RunRow {
            ic_index: 0,
            ic_label: label.into(),
            run: 0,
            filter: r.filter,
            seed: r.seed,
            truth_hash: r.truth_hash,
            metrics: Some(r.metrics),
            error: None,
        })
        .collect()
}

/// Writes `record.csv`, `runs.csv`, `summary.csv` and `meta.json` for a set
/// of paired single runs.
pub fn write_run_outputs(dir: &Path, records: &[ExperimentRecord], manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    let rows: Vec<TidyRow> = records.iter().flat_map(record_rows).collect();
    write_tidy(fs::File::create(dir.join("record.csv"))?, &rows)?;
    let runs = single_run_rows(records, "run");
    write_runs(fs::File::create(dir.join("runs.csv"))?, &runs)?;
    write_summary(fs::File::create(dir.join("summary.csv"))?, &summary_rows(&runs))?;
    manifest.write(&dir.join("meta.json"))
}

pub fn write_mc_outputs(dir: &Path, summary: &McSummary, manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_runs(fs::File::create(dir.join("runs.csv"))?, &summary.runs)?;
    write_summary(fs::File::create(dir.join("summary.csv"))?, &summary.rows)?;
    manifest.write(&dir.join("meta.json"))
}

fn cell(x: Option<f64>, prec: usize) -> String {
    x.filter(|v| v.is_finite()).map(|v| format!("{v:.prec$}")).unwrap_or_else(|| "-".into())
}

/// Plain-text tables from an output directory.
pub fn format_report(dir: &Path) -> Result<String> {
    let rows = read_summary(fs::File::open(dir.join("summary.csv"))?)?;
    let runs = match fs::File::open(dir.join("runs.csv")) {
        Ok(f) => read_runs(f)?,
        Err(_) => Vec::new(),
    };
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<6} {:<8} {:>5} {:>5} {:>10} {:>10} {:>8} {:>10} {:>10} {:>10} {:>9} {:>9}",
        "ic", "filter", "runs", "fail", "avg_rmse", "med_rmse", "avg_ness", "runtime_s", "ctrl_mean", "ratio", "rollback", "var_share"
    );
    for r in &rows {
        let _ = writeln!(
            out,
            "{:<6} {:<8} {:>5} {:>5} {:>10} {:>10} {:>8} {:>10} {:>10} {:>10} {:>9} {:>9}",
            r.ic_label,
            r.filter.name(),
            r.runs,
            r.failures,
            cell(Some(r.avg_rmse), 3),
            cell(Some(r.median_rmse), 3),
            cell(Some(r.avg_ness), 3),
            cell(Some(r.avg_runtime_secs), 3),
            cell(r.control_mean, 3),
            cell(r.ratio_mean, 3),
            cell(r.rollback_fraction, 3),
            cell(r.variational_share, 3),
        );
    }
    let max_batches = runs.iter().filter_map(|r| r.metrics.and_then(|m| m.max_batches)).max();
    if let Some(b) = max_batches {
        let _ = writeln!(out, "largest batch count in any control solve: {b}");
    }
    Ok(out)
}
