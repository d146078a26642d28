//! Weighted particle sets, observation likelihoods, effective sample size,
//! systematic resampling and empirical moments.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnsembleError {
    #[error("ensemble must contain at least one particle")]
    Empty,
    #[error("weights must be nonnegative and sum to one (sum = {sum})")]
    NotNormalized { sum: f64 },
    #[error("{states} states but {weights} weights")]
    LengthMismatch { states: usize, weights: usize },
    #[error("particle {0} has a non-finite state")]
    NonFinite(usize),
    #[error("noise covariance is not symmetric positive-definite")]
    NotPositiveDefinite,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

const NORMALIZATION_TOL: f64 = 1e-10;

fn check_normalized(weights: &[f64]) -> Result<(), EnsembleError> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() {
        return Err(EnsembleError::Empty);
    }
    if weights.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > NORMALIZATION_TOL {
        return Err(EnsembleError::NotNormalized { sum });
    }
    Ok(())
}

/// `N` weighted states at a common time.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    states: Vec<DVector<f64>>,
    weights: Vec<f64>,
    pub time: f64,
}

impl ParticleEnsemble {
    pub fn new(states: Vec<DVector<f64>>, weights: Vec<f64>, time: f64) -> Result<Self, EnsembleError> {
        if states.is_empty() {
            return Err(EnsembleError::Empty);
        }
        if states.len() != weights.len() {
            return Err(EnsembleError::LengthMismatch {
                states: states.len(),
                weights: weights.len(),
            });
        }
        let dim = states[0].len();
        for (i, s) in states.iter().enumerate() {
            if s.len() != dim {
                return Err(EnsembleError::Dimension {
                    expected: dim,
                    got: s.len(),
                });
            }
            if !s.iter().all(|v| v.is_finite()) {
                return Err(EnsembleError::NonFinite(i));
            }
        }
        check_normalized(&weights)?;
        Ok(Self { states, weights, time })
    }

    pub fn uniform(states: Vec<DVector<f64>>, time: f64) -> Result<Self, EnsembleError> {
        let n = states.len().max(1);
        Self::new(states, vec![1.0 / n as f64; n], time)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.states[0].len()
    }

    pub fn states(&self) -> &[DVector<f64>] {
        &self.states
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn ess(&self) -> f64 {
        effective_sample_size(&self.weights).expect("ensemble weights are normalized")
    }

    /// ESS divided by `N`, in `[1/N, 1]`.
    pub fn normalized_ess(&self) -> f64 {
        self.ess() / self.len() as f64
    }

    pub(crate) fn from_parts_unchecked(states: Vec<DVector<f64>>, weights: Vec<f64>, time: f64) -> Self {
        debug_assert_eq!(states.len(), weights.len());
        Self { states, weights, time }
    }
}

/// `1/Σw²` for normalized weights, evaluated as `N²/Σ(N·w)²` so that
/// uniform and one-hot vectors come out exact.
pub fn effective_sample_size(weights: &[f64]) -> Result<f64, EnsembleError> {
    check_normalized(weights)?;
    let n = weights.len() as f64;
    let sum_sq: f64 = weights.iter().map(|w| (w * n) * (w * n)).sum();
    Ok(n * n / sum_sq)
}

/// Normalizes log-weights with max subtraction. Returns `None` when every
/// entry is `-inf` or NaN.
pub fn normalize_log_weights(log_weights: &[f64]) -> Option<Vec<f64>> {
    let max = log_weights
        .iter()
        .copied()
        .filter(|v| !v.is_nan())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let unnorm: Vec<f64> = log_weights
        .iter()
        .map(|&l| if l.is_nan() { 0.0 } else { (l - max).exp() })
        .collect();
    let total: f64 = unnorm.iter().sum();
    Some(unnorm.into_iter().map(|w| w / total).collect())
}

/// Linear-Gaussian measurement `Y = H X + ξ`, `ξ ~ N(0, Σ_y)`.
#[derive(Debug, Clone)]
pub struct ObservationModel {
    operator: DMatrix<f64>,
    noise_covariance: DMatrix<f64>,
    precision: DMatrix<f64>,
}

impl ObservationModel {
    pub fn new(operator: DMatrix<f64>, noise_covariance: DMatrix<f64>) -> Result<Self, EnsembleError> {
        let d = operator.nrows();
        if noise_covariance.nrows() != d || noise_covariance.ncols() != d {
            return Err(EnsembleError::Dimension {
                expected: d,
                got: noise_covariance.nrows(),
            });
        }
        if (&noise_covariance - noise_covariance.transpose()).amax() > 1e-12 * noise_covariance.amax() {
            return Err(EnsembleError::NotPositiveDefinite);
        }
        let chol = noise_covariance
            .clone()
            .cholesky()
            .ok_or(EnsembleError::NotPositiveDefinite)?;
        let precision = chol.inverse();
        Ok(Self {
            operator,
            noise_covariance,
            precision,
        })
    }

    /// `h = Id`, `Σ_y = variance · Id`.
    pub fn identity(dimension: usize, variance: f64) -> Result<Self, EnsembleError> {
        Self::new(
            DMatrix::identity(dimension, dimension),
            DMatrix::identity(dimension, dimension) * variance,
        )
    }

    pub fn operator(&self) -> &DMatrix<f64> {
        &self.operator
    }

    pub fn noise_covariance(&self) -> &DMatrix<f64> {
        &self.noise_covariance
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn observation_dimension(&self) -> usize {
        self.operator.nrows()
    }

    pub fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.operator * x
    }

    /// `½⟨y − h(x), Σ_y⁻¹(y − h(x))⟩`, the terminal cost `g` of the control problem.
    pub fn neg_log_likelihood(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let r = y - self.observe(x);
        0.5 * r.dot(&(&self.precision * &r))
    }

    /// Gaussian log-likelihood up to an additive constant.
    pub fn log_likelihood(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        -self.neg_log_likelihood(x, y)
    }

    /// `∇ₓ` of [`Self::neg_log_likelihood`]: `−Hᵀ Σ_y⁻¹ (y − Hx)`.
    pub fn neg_log_likelihood_gradient(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        let r = y - self.observe(x);
        -(self.operator.transpose() * (&self.precision * r))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ReweightOutcome {
    /// Every unnormalized weight vanished; weights were reset to uniform.
    pub collapsed: bool,
}

/// Bayes update `w̃ᵢ ∝ cᵢ · wᵢ · exp(log p(Y | Xᵢ))` with the extra factors
/// `cᵢ` supplied in log form (all zeros for the bootstrap filter).
pub fn bayes_reweight(
    ensemble: &ParticleEnsemble,
    observation: &DVector<f64>,
    obs_model: &ObservationModel,
    log_extra_factors: &[f64],
) -> Result<(ParticleEnsemble, ReweightOutcome), EnsembleError> {
    if log_extra_factors.len() != ensemble.len() {
        return Err(EnsembleError::LengthMismatch {
            states: ensemble.len(),
            weights: log_extra_factors.len(),
        });
    }
    let log_w: Vec<f64> = ensemble
        .states
        .iter()
        .zip(&ensemble.weights)
        .zip(log_extra_factors)
        .map(|((x, &w), &c)| {
            if w > 0.0 {
                c + w.ln() + obs_model.log_likelihood(x, observation)
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let (weights, outcome) = match normalize_log_weights(&log_w) {
        Some(w) => (w, ReweightOutcome { collapsed: false }),
        None => (
            vec![1.0 / ensemble.len() as f64; ensemble.len()],
            ReweightOutcome { collapsed: true },
        ),
    };
    Ok((
        ParticleEnsemble::from_parts_unchecked(ensemble.states.clone(), weights, ensemble.time),
        outcome,
    ))
}

/// Parent index of each of the `N` offspring for the systematic scheme with
/// strata `(u + j)/N`.
pub fn systematic_indices(weights: &[f64], u: f64) -> Vec<usize> {
    let n = weights.len();
    let nf = n as f64;
    let mut indices = Vec::with_capacity(n);
    let mut cumulative = 0.0;
    let mut parent = 0;
    for j in 0..n {
        let point = u + j as f64;
        while parent < n - 1 && cumulative + nf * weights[parent] <= point {
            cumulative += nf * weights[parent];
            parent += 1;
        }
        // skip trailing zero-weight parents that round-off could land on
        while weights[parent] == 0.0 && parent > 0 {
            parent -= 1;
        }
        indices.push(parent);
    }
    indices
}

/// Offspring count per parent for a list of parent indices.
pub fn offspring_counts(indices: &[usize], n: usize) -> Vec<usize> {
    let mut counts = vec![0; n];
    for &i in indices {
        counts[i] += 1;
    }
    counts
}

/// Systematic resampling; output weights are uniform. Returns the parent
/// index of every offspring alongside the new ensemble.
pub fn systematic_resample(
    ensemble: &ParticleEnsemble,
    u: f64,
) -> Result<(ParticleEnsemble, Vec<usize>), EnsembleError> {
    check_normalized(&ensemble.weights)?;
    let indices = systematic_indices(&ensemble.weights, u.clamp(0.0, 1.0 - f64::EPSILON));
    let states = indices.iter().map(|&i| ensemble.states[i].clone()).collect();
    let n = ensemble.len();
    Ok((
        ParticleEnsemble::from_parts_unchecked(states, vec![1.0 / n as f64; n], ensemble.time),
        indices,
    ))
}

/// Resampling trigger: `N_eff < N/2`.
pub fn needs_resampling(ensemble: &ParticleEnsemble) -> bool {
    ensemble.ess() < 0.5 * ensemble.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleMoments {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

/// Weighted mean and weighted covariance (no Bessel correction).
pub fn empirical_moments(ensemble: &ParticleEnsemble) -> EnsembleMoments {
    weighted_moments(&ensemble.states, &ensemble.weights)
}

pub fn weighted_mean(states: &[DVector<f64>], weights: &[f64]) -> DVector<f64> {
    let dim = states[0].len();
    states
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w != 0.0)
        .fold(DVector::zeros(dim), |acc, (x, &w)| acc + x * w)
}

pub fn weighted_moments(states: &[DVector<f64>], weights: &[f64]) -> EnsembleMoments {
    let mean = weighted_mean(states, weights);
    let dim = mean.len();
    let mut covariance = states
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w != 0.0)
        .fold(DMatrix::zeros(dim, dim), |acc, (x, &w)| {
            let d = x - &mean;
            acc + &d * d.transpose() * w
        });
    covariance = (&covariance + covariance.transpose()) * 0.5;
    EnsembleMoments { mean, covariance }
}
