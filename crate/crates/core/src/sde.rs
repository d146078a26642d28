//! Signal dynamics with additive noise, Brownian paths, and the
//! RK4-Maruyama integrator used by the filters and the control estimators.
//!
//! One step advances the deterministic part (drift plus a control held
//! constant over the step) with classical fourth-order Runge-Kutta and then
//! adds `σ·ΔW` once. With `σ = 0` this is plain RK4.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::streams;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SdeError {
    #[error("integrator produced a non-finite state at step {step}")]
    NonFinite { step: usize },
    #[error("interval of length {span} is not an integer number of steps of {dt}")]
    NonIntegerSteps { span: f64, dt: f64 },
    #[error("step size must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("diffusion matrix is not symmetric positive-definite")]
    NotPositiveDefinite,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("Brownian path has {available} increments, {required} required")]
    PathTooShort { available: usize, required: usize },
}

/// A signal process `dX = f(X) dt + σ dW` with constant dispersion `σ`.
pub trait SdeModel: Send + Sync {
    fn dimension(&self) -> usize;

    fn drift(&self, x: &DVector<f64>) -> DVector<f64>;

    /// `∂f_i/∂x_j` in row `i`, column `j`.
    fn drift_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;

    fn dispersion(&self) -> &DMatrix<f64>;

    /// `R = σσᵀ`.
    fn diffusion(&self) -> DMatrix<f64> {
        let s = self.dispersion();
        s * s.transpose()
    }
}

/// Lower-triangular `σ` with `σσᵀ = R`. An all-zero `R` maps to a zero `σ`.
pub fn dispersion_from_diffusion(diffusion: &DMatrix<f64>) -> Result<DMatrix<f64>, SdeError> {
    if !diffusion.is_square() {
        return Err(SdeError::NotPositiveDefinite);
    }
    if diffusion.iter().all(|&v| v == 0.0) {
        return Ok(diffusion.clone());
    }
    let asym = (diffusion - diffusion.transpose()).amax();
    if asym > 1e-12 * diffusion.amax().max(1.0) {
        return Err(SdeError::NotPositiveDefinite);
    }
    diffusion
        .clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or(SdeError::NotPositiveDefinite)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct L63Params {
    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
}

impl Default for L63Params {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            gamma: 28.0,
            beta: 8.0 / 3.0,
        }
    }
}

/// `(α(y − x), γx − y − xz, xy − βz)`.
pub fn l63_drift(state: &DVector<f64>, p: &L63Params) -> DVector<f64> {
    let (x, y, z) = (state[0], state[1], state[2]);
    DVector::from_vec(vec![
        p.alpha * (y - x),
        p.gamma * x - y - x * z,
        x * y - p.beta * z,
    ])
}

pub fn l63_jacobian(state: &DVector<f64>, p: &L63Params) -> DMatrix<f64> {
    let (x, y, z) = (state[0], state[1], state[2]);
    DMatrix::from_row_slice(
        3,
        3,
        &[
            -p.alpha, p.alpha, 0.0, //
            p.gamma - z, -1.0, -x, //
            y, x, -p.beta,
        ],
    )
}

/// Diffusion matrix of the stochastic Lorenz-63 testbed.
pub fn default_l63_diffusion() -> DMatrix<f64> {
    DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.5, 1.0, 2.0, 1.0, 0.5, 1.0, 2.0])
}

#[derive(Debug, Clone)]
pub struct Lorenz63 {
    pub params: L63Params,
    dispersion: DMatrix<f64>,
}

impl Lorenz63 {
    pub fn new(params: L63Params, diffusion: &DMatrix<f64>) -> Result<Self, SdeError> {
        if diffusion.nrows() != 3 {
            return Err(SdeError::Dimension {
                expected: 3,
                got: diffusion.nrows(),
            });
        }
        Ok(Self {
            params,
            dispersion: dispersion_from_diffusion(diffusion)?,
        })
    }

    /// Standard parameters with the default diffusion matrix.
    pub fn standard() -> Self {
        Self::new(L63Params::default(), &default_l63_diffusion())
            .expect("default diffusion is SPD")
    }

    /// Same drift, no noise.
    pub fn deterministic(&self) -> Self {
        Self {
            params: self.params,
            dispersion: DMatrix::zeros(3, 3),
        }
    }
}

impl SdeModel for Lorenz63 {
    fn dimension(&self) -> usize {
        3
    }

    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        l63_drift(x, &self.params)
    }

    fn drift_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        l63_jacobian(x, &self.params)
    }

    fn dispersion(&self) -> &DMatrix<f64> {
        &self.dispersion
    }
}

/// `dX = A X dt + σ dW`. Covers Ornstein-Uhlenbeck (`A = a`, 1-D), pure
/// diffusion (`A = 0`) and the linear test problems of the variational solver.
#[derive(Debug, Clone)]
pub struct LinearSde {
    pub matrix: DMatrix<f64>,
    dispersion: DMatrix<f64>,
}

impl LinearSde {
    pub fn new(matrix: DMatrix<f64>, dispersion: DMatrix<f64>) -> Result<Self, SdeError> {
        let n = matrix.nrows();
        if !matrix.is_square() || dispersion.nrows() != n || dispersion.ncols() != n {
            return Err(SdeError::Dimension {
                expected: n,
                got: dispersion.nrows(),
            });
        }
        Ok(Self { matrix, dispersion })
    }

    pub fn ornstein_uhlenbeck(rate: f64, sigma: f64) -> Self {
        Self {
            matrix: DMatrix::from_element(1, 1, rate),
            dispersion: DMatrix::from_element(1, 1, sigma),
        }
    }
}

impl SdeModel for LinearSde {
    fn dimension(&self) -> usize {
        self.matrix.nrows()
    }

    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.matrix * x
    }

    fn drift_jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.matrix.clone()
    }

    fn dispersion(&self) -> &DMatrix<f64> {
        &self.dispersion
    }
}

/// Brownian increments `ΔW_n ~ N(0, dt·I)` for consecutive integrator steps.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianPath {
    pub dt: f64,
    pub increments: Vec<DVector<f64>>,
    /// Seed of the stream the increments were drawn from (0 for a zero path).
    pub stream: u64,
}

impl BrownianPath {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, dimension: usize, dt: f64, steps: usize) -> Self {
        let scale = dt.sqrt();
        let increments = (0..steps)
            .map(|_| {
                DVector::from_iterator(
                    dimension,
                    (0..dimension).map(|_| scale * rng.sample::<f64, _>(StandardNormal)),
                )
            })
            .collect();
        Self {
            dt,
            increments,
            stream: 0,
        }
    }

    pub fn from_seed(seed: u64, dimension: usize, dt: f64, steps: usize) -> Self {
        let mut rng = streams::stream_rng(seed);
        let mut path = Self::sample(&mut rng, dimension, dt, steps);
        path.stream = seed;
        path
    }

    pub fn zero(dimension: usize, dt: f64, steps: usize) -> Self {
        Self {
            dt,
            increments: vec![DVector::zeros(dimension); steps],
            stream: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.increments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.increments.is_empty()
    }
}

/// Number of steps of size `dt` spanning `[t0, t1]`; must be a whole number.
pub fn step_count(t0: f64, t1: f64, dt: f64) -> Result<usize, SdeError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(SdeError::InvalidStep(dt));
    }
    let span = t1 - t0;
    let n = span / dt;
    let r = n.round();
    if r < 0.0 || (n - r).abs() > 1e-9 * r.max(1.0) {
        return Err(SdeError::NonIntegerSteps { span, dt });
    }
    Ok(r as usize)
}

fn vector_field<M: SdeModel + ?Sized>(
    model: &M,
    x: &DVector<f64>,
    control: Option<&DVector<f64>>,
) -> DVector<f64> {
    let f = model.drift(x);
    match control {
        Some(u) => f + u,
        None => f,
    }
}

/// One RK4-Maruyama step. `control = None` and `dw = None` mean zero.
pub fn integrate_step<M: SdeModel + ?Sized>(
    model: &M,
    state: &DVector<f64>,
    control: Option<&DVector<f64>>,
    dt: f64,
    dw: Option<&DVector<f64>>,
) -> Result<DVector<f64>, SdeError> {
    let half = 0.5 * dt;
    let k1 = vector_field(model, state, control);
    let k2 = vector_field(model, &(state + &k1 * half), control);
    let k3 = vector_field(model, &(state + &k2 * half), control);
    let k4 = vector_field(model, &(state + &k3 * dt), control);
    let mut next = state + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    if let Some(dw) = dw {
        next += model.dispersion() * dw;
    }
    if next.iter().all(|v| v.is_finite()) {
        Ok(next)
    } else {
        Err(SdeError::NonFinite { step: 0 })
    }
}

/// One uncontrolled step of the state together with its fundamental matrix
/// `Ψ' = ∇f(x)·Ψ`, both advanced by the same RK4 stages. Additive noise does
/// not enter the tangent dynamics.
pub fn integrate_step_tangent<M: SdeModel + ?Sized>(
    model: &M,
    state: &DVector<f64>,
    tangent: &DMatrix<f64>,
    dt: f64,
    dw: Option<&DVector<f64>>,
) -> Result<(DVector<f64>, DMatrix<f64>), SdeError> {
    let half = 0.5 * dt;
    let k1 = model.drift(state);
    let m1 = model.drift_jacobian(state) * tangent;
    let x2 = state + &k1 * half;
    let k2 = model.drift(&x2);
    let m2 = model.drift_jacobian(&x2) * (tangent + &m1 * half);
    let x3 = state + &k2 * half;
    let k3 = model.drift(&x3);
    let m3 = model.drift_jacobian(&x3) * (tangent + &m2 * half);
    let x4 = state + &k3 * dt;
    let k4 = model.drift(&x4);
    let m4 = model.drift_jacobian(&x4) * (tangent + &m3 * dt);
    let mut next = state + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    let next_tangent = tangent + (m1 + m2 * 2.0 + m3 * 2.0 + m4) * (dt / 6.0);
    if let Some(dw) = dw {
        next += model.dispersion() * dw;
    }
    if next.iter().chain(next_tangent.iter()).all(|v| v.is_finite()) {
        Ok((next, next_tangent))
    } else {
        Err(SdeError::NonFinite { step: 0 })
    }
}

/// Piecewise-constant control over consecutive integrator steps. Steps past
/// the last segment are uncontrolled.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ControlSchedule {
    segments: Vec<(usize, Option<DVector<f64>>)>,
}

impl ControlSchedule {
    pub fn uncontrolled() -> Self {
        Self::default()
    }

    pub fn push(&mut self, steps: usize, control: Option<DVector<f64>>) -> &mut Self {
        self.segments.push((steps, control));
        self
    }

    pub fn control_at(&self, step: usize) -> Option<&DVector<f64>> {
        let mut start = 0;
        for (len, u) in &self.segments {
            if step < start + len {
                return u.as_ref();
            }
            start += len;
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub t0: f64,
    pub dt: f64,
    pub states: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn time(&self, index: usize) -> f64 {
        self.t0 + index as f64 * self.dt
    }

    pub fn last(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory holds at least the initial state")
    }
}

/// Integrates from `t0` to `t1` using the path's step size and the first
/// `(t1 − t0)/dt` increments of `path`.
pub fn integrate_path<M: SdeModel + ?Sized>(
    model: &M,
    state0: &DVector<f64>,
    controls: &ControlSchedule,
    path: &BrownianPath,
    t0: f64,
    t1: f64,
) -> Result<Trajectory, SdeError> {
    if state0.len() != model.dimension() {
        return Err(SdeError::Dimension {
            expected: model.dimension(),
            got: state0.len(),
        });
    }
    let steps = step_count(t0, t1, path.dt)?;
    if path.len() < steps {
        return Err(SdeError::PathTooShort {
            available: path.len(),
            required: steps,
        });
    }
    let mut states = Vec::with_capacity(steps + 1);
    states.push(state0.clone());
    for (n, dw) in path.increments[..steps].iter().enumerate() {
        let next = integrate_step(model, &states[n], controls.control_at(n), path.dt, Some(dw))
            .map_err(|_| SdeError::NonFinite { step: n })?;
        states.push(next);
    }
    Ok(Trajectory {
        t0,
        dt: path.dt,
        states,
    })
}

/// Noise-free, uncontrolled flow over `steps` steps.
pub fn deterministic_flow<M: SdeModel + ?Sized>(
    model: &M,
    state0: &DVector<f64>,
    steps: usize,
    dt: f64,
) -> Result<DVector<f64>, SdeError> {
    let mut x = state0.clone();
    for n in 0..steps {
        x = integrate_step(model, &x, None, dt, None).map_err(|_| SdeError::NonFinite { step: n })?;
    }
    Ok(x)
}
