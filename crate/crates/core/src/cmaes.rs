//! Covariance Matrix Adaptation Evolution Strategy.
//!
//! The optimizer is a set of pure state transitions: [`sample_population`]
//! draws candidates from the current [`CmaState`], the caller evaluates them,
//! [`rank_population`] orders the results and [`step`] produces the next state.
//! Updates run in the order mean, conjugate path, step size, cumulative path,
//! covariance.
//!
//! [`CmaEs`] bundles parameters, state, a seeded generator and the sample
//! archive for callers that just want an ask/tell loop.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest magnitude allowed for the step-size exponent.
pub const STEP_EXPONENT_LIMIT: f64 = 20.0;

/// Resample attempts before an out-of-bounds candidate is clamped.
pub const MAX_RESAMPLES: usize = 10;

/// Relative eigenvalue floor below which the covariance counts as broken.
pub const CONDITION_FLOOR: f64 = 1e-14;

/// Eigenvalues are lifted to this fraction of the largest one after each
/// covariance update, bounding the condition number at 1e12.
pub const EIGEN_CLIP: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CmaError {
    #[error("search dimension must be at least 1")]
    ZeroDimension,
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParam { field: &'static str, reason: String },
    #[error("population size mismatch: {candidates} candidates, {fitnesses} fitness values")]
    LengthMismatch { candidates: usize, fitnesses: usize },
    #[error("candidate {index} has non-finite fitness {value}")]
    NonFiniteFitness { index: usize, value: f64 },
    #[error("covariance is not positive definite (min eigenvalue {min}, max {max})")]
    NotPositiveDefinite { min: f64, max: f64 },
    #[error("sample archive is empty")]
    EmptyArchive,
    #[error("archive generation {got} precedes last recorded generation {last}")]
    GenerationOrder { got: u64, last: u64 },
}

/// Strategy parameters. Learning rates follow the usual CMA-ES naming.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmaParams {
    pub dim: usize,
    pub lambda: usize,
    pub mu: usize,
    pub weights: Vec<f64>,
    pub c_m: f64,
    pub c_1: f64,
    pub c_mu: f64,
    pub c_c: f64,
    pub c_sigma: f64,
    pub d_sigma: f64,
    pub sigma0: f64,
    pub mean0: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Partial parameter set applied on top of [`default_params`].
///
/// Unknown keys are rejected when deserializing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamOverrides {
    pub lambda: Option<usize>,
    pub mu: Option<usize>,
    pub weights: Option<Vec<f64>>,
    pub c_m: Option<f64>,
    pub c_1: Option<f64>,
    pub c_mu: Option<f64>,
    pub c_c: Option<f64>,
    pub c_sigma: Option<f64>,
    pub d_sigma: Option<f64>,
    pub sigma0: Option<f64>,
    pub mean0: Option<Vec<f64>>,
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
}

/// Positive log-decreasing recombination weights, normalized to sum to one.
pub fn log_weights(mu: usize) -> Vec<f64> {
    let raw: Vec<f64> = (1..=mu)
        .map(|i| (mu as f64 + 0.5).ln() - (i as f64).ln())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Variance-effective selection mass `1 / Σ wᵢ²`.
pub fn mu_eff(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

fn damping_for(mu_eff: f64, n: usize, c_sigma: f64) -> f64 {
    1.0 + 2.0 * (((mu_eff - 1.0) / (n as f64 + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma
}

fn cumulation_for(mu_eff: f64, n: usize) -> f64 {
    let n = n as f64;
    (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n)
}

/// Stiffness-tuning defaults: λ = 7, σ₀ = 150, c_m = 1, c₁ = 0.15,
/// c_μ = 0.058, c_σ = 0.62 on the box [0, 400]ⁿ with the mean starting at
/// half the upper bound. μ, weights, c_c and d_σ take the standard values.
pub fn default_params(n: usize, overrides: &ParamOverrides) -> Result<CmaParams, CmaError> {
    if n == 0 {
        return Err(CmaError::ZeroDimension);
    }
    let lambda = overrides.lambda.unwrap_or(7);
    let mu = overrides.mu.unwrap_or(lambda / 2);
    let weights = match &overrides.weights {
        Some(w) => w.clone(),
        None => log_weights(mu),
    };
    let c_sigma = overrides.c_sigma.unwrap_or(0.62);
    let me = mu_eff(&weights);
    let lower = overrides.lower.clone().unwrap_or_else(|| vec![0.0; n]);
    let upper = overrides.upper.clone().unwrap_or_else(|| vec![400.0; n]);
    let mean0 = overrides
        .mean0
        .clone()
        .unwrap_or_else(|| upper.iter().map(|u| 0.5 * u).collect());
    let params = CmaParams {
        dim: n,
        lambda,
        mu,
        weights,
        c_m: overrides.c_m.unwrap_or(1.0),
        c_1: overrides.c_1.unwrap_or(0.15),
        c_mu: overrides.c_mu.unwrap_or(0.058),
        c_c: overrides.c_c.unwrap_or_else(|| cumulation_for(me, n)),
        c_sigma,
        d_sigma: overrides.d_sigma.unwrap_or_else(|| damping_for(me, n, c_sigma)),
        sigma0: overrides.sigma0.unwrap_or(150.0),
        mean0,
        lower,
        upper,
    };
    params.validate()?;
    Ok(params)
}

/// Textbook CMA-ES defaults for dimension `n` (population size
/// 4 + ⌊3 ln n⌋ and the matching learning rates).
pub fn canonical_params(
    mean0: Vec<f64>,
    sigma0: f64,
    lower: Vec<f64>,
    upper: Vec<f64>,
) -> Result<CmaParams, CmaError> {
    let n = mean0.len();
    if n == 0 {
        return Err(CmaError::ZeroDimension);
    }
    let nf = n as f64;
    let lambda = 4 + (3.0 * nf.ln()).floor() as usize;
    let mu = lambda / 2;
    let weights = log_weights(mu);
    let me = mu_eff(&weights);
    let c_sigma = (me + 2.0) / (nf + me + 5.0);
    let c_1 = 2.0 / ((nf + 1.3).powi(2) + me);
    let c_mu = (1.0 - c_1).min(2.0 * (me - 2.0 + 1.0 / me) / ((nf + 2.0).powi(2) + me));
    let params = CmaParams {
        dim: n,
        lambda,
        mu,
        weights,
        c_m: 1.0,
        c_1,
        c_mu,
        c_c: cumulation_for(me, n),
        c_sigma,
        d_sigma: damping_for(me, n, c_sigma),
        sigma0,
        mean0,
        lower,
        upper,
    };
    params.validate()?;
    Ok(params)
}

impl CmaParams {
    pub fn mu_eff(&self) -> f64 {
        mu_eff(&self.weights)
    }

    pub fn validate(&self) -> Result<(), CmaError> {
        fn bad(field: &'static str, reason: impl Into<String>) -> CmaError {
            CmaError::InvalidParam {
                field,
                reason: reason.into(),
            }
        }
        if self.dim == 0 {
            return Err(CmaError::ZeroDimension);
        }
        if self.lambda < 2 {
            return Err(bad("lambda", format!("{} < 2", self.lambda)));
        }
        if self.mu < 1 || self.mu >= self.lambda {
            return Err(bad("mu", format!("need 1 <= mu < lambda, got {}", self.mu)));
        }
        if self.weights.len() != self.mu {
            return Err(bad(
                "weights",
                format!("{} weights for mu = {}", self.weights.len(), self.mu),
            ));
        }
        if self.weights.iter().any(|w| !(*w > 0.0 && *w <= 1.0)) {
            return Err(bad("weights", "each weight must lie in (0, 1]"));
        }
        if self.mu > 1 && self.weights.iter().any(|w| *w >= 1.0) {
            return Err(bad("weights", "each weight must lie in (0, 1)"));
        }
        if self.weights.windows(2).any(|p| p[1] > p[0]) {
            return Err(bad("weights", "weights must be non-increasing"));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(bad("weights", format!("weights sum to {total}")));
        }
        for (field, rate) in [
            ("c_m", self.c_m),
            ("c_1", self.c_1),
            ("c_mu", self.c_mu),
            ("c_c", self.c_c),
            ("c_sigma", self.c_sigma),
        ] {
            if !(rate > 0.0 && rate <= 1.0) {
                return Err(bad(field, format!("learning rate {rate} outside (0, 1]")));
            }
        }
        if self.c_1 + self.c_mu > 1.0 {
            return Err(bad("c_mu", "c_1 + c_mu must not exceed 1"));
        }
        if !(self.d_sigma > 0.0) {
            return Err(bad("d_sigma", format!("{} <= 0", self.d_sigma)));
        }
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return Err(bad("sigma0", format!("{} <= 0", self.sigma0)));
        }
        for (field, v) in [
            ("mean0", &self.mean0),
            ("lower", &self.lower),
            ("upper", &self.upper),
        ] {
            if v.len() != self.dim {
                return Err(bad(field, format!("length {} != dim {}", v.len(), self.dim)));
            }
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| !(l < u)) {
            return Err(bad("upper", "lower bound must be below upper bound"));
        }
        Ok(())
    }

    pub fn expected_norm(&self) -> f64 {
        expected_standard_norm(self.dim)
    }

    fn in_bounds(&self, x: &DVector<f64>) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (l, u))| *v >= *l && *v <= *u)
    }

    fn clamp(&self, x: &mut DVector<f64>) {
        for (v, (l, u)) in x.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *v = v.clamp(*l, *u);
        }
    }
}

/// Covariance matrix together with its cached spectral decomposition
/// `C = B diag(eigenvalues) Bᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Covariance {
    pub matrix: DMatrix<f64>,
    pub basis: DMatrix<f64>,
    pub eigenvalues: DVector<f64>,
}

impl Covariance {
    pub fn identity(n: usize) -> Self {
        Self {
            matrix: DMatrix::identity(n, n),
            basis: DMatrix::identity(n, n),
            eigenvalues: DVector::from_element(n, 1.0),
        }
    }

    /// Symmetrizes `matrix`, decomposes it and checks the conditioning floor.
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self, CmaError> {
        let sym = (&matrix + matrix.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym.clone());
        let min = eig.eigenvalues.min();
        let max = eig.eigenvalues.max();
        if !(min.is_finite() && max.is_finite()) || max <= 0.0 || min <= CONDITION_FLOOR * max {
            return Err(CmaError::NotPositiveDefinite { min, max });
        }
        Ok(Self {
            matrix: sym,
            basis: eig.eigenvectors,
            eigenvalues: eig.eigenvalues,
        })
    }

    /// Lifts eigenvalues below `EIGEN_CLIP · max` and rebuilds the matrix.
    fn clip_condition(self) -> Self {
        let max = self.eigenvalues.max();
        let floor = EIGEN_CLIP * max;
        if self.eigenvalues.min() >= floor {
            return self;
        }
        log::debug!("covariance condition clipped at {}", 1.0 / EIGEN_CLIP);
        let eigenvalues = self.eigenvalues.map(|v| v.max(floor));
        let matrix = &self.basis * DMatrix::from_diagonal(&eigenvalues) * self.basis.transpose();
        let matrix = (&matrix + matrix.transpose()) * 0.5;
        Self {
            matrix,
            basis: self.basis,
            eigenvalues,
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn check(&self) -> Result<(), CmaError> {
        let min = self.eigenvalues.min();
        let max = self.eigenvalues.max();
        if max <= 0.0 || min <= CONDITION_FLOOR * max {
            return Err(CmaError::NotPositiveDefinite { min, max });
        }
        Ok(())
    }

    /// `B D z` with `D = diag(√eigenvalues)`.
    pub fn sqrt_mul(&self, z: &DVector<f64>) -> DVector<f64> {
        let scaled = z.zip_map(&self.eigenvalues, |zi, ev| zi * ev.sqrt());
        &self.basis * scaled
    }

    /// `C^{-1/2} y = B D⁻¹ Bᵀ y`.
    pub fn inv_sqrt_mul(&self, y: &DVector<f64>) -> DVector<f64> {
        let rotated = self.basis.transpose() * y;
        let scaled = rotated.zip_map(&self.eigenvalues, |r, ev| r / ev.sqrt());
        &self.basis * scaled
    }
}

/// Complete optimizer state for one generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmaState {
    pub mean: DVector<f64>,
    pub cov: Covariance,
    pub sigma: f64,
    pub p_c: DVector<f64>,
    pub p_sigma: DVector<f64>,
    pub generation: u64,
}

impl CmaState {
    pub fn new(params: &CmaParams) -> Self {
        let n = params.dim;
        Self {
            mean: DVector::from_column_slice(&params.mean0),
            cov: Covariance::identity(n),
            sigma: params.sigma0,
            p_c: DVector::zeros(n),
            p_sigma: DVector::zeros(n),
            generation: 0,
        }
    }

    /// Mean projected into the box.
    pub fn clamped_mean(&self, params: &CmaParams) -> Vec<f64> {
        let mut m = self.mean.clone();
        params.clamp(&mut m);
        m.iter().copied().collect()
    }
}

/// Candidates paired with fitness values and their sort order.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluatedPopulation {
    pub candidates: Vec<DVector<f64>>,
    pub fitnesses: Vec<f64>,
    /// `order[i]` is the index of the i-th best candidate (0-based).
    pub order: Vec<usize>,
}

impl EvaluatedPopulation {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// The i-th best candidate.
    pub fn ranked(&self, i: usize) -> &DVector<f64> {
        &self.candidates[self.order[i]]
    }

    /// Weighted sum of the selected steps `Σ wᵢ (x_{i:λ} − m) / σ`.
    fn weighted_step(&self, state: &CmaState, params: &CmaParams) -> DVector<f64> {
        let mut y_w = DVector::zeros(params.dim);
        if state.sigma == 0.0 {
            return y_w;
        }
        for (i, w) in params.weights.iter().enumerate() {
            y_w += (self.ranked(i) - &state.mean) * (*w / state.sigma);
        }
        y_w
    }
}

/// Draws λ candidates `m + σ B D z` and repairs those outside the box.
pub fn sample_population<R: Rng + ?Sized>(
    state: &CmaState,
    params: &CmaParams,
    rng: &mut R,
) -> Result<Vec<DVector<f64>>, CmaError> {
    state.cov.check()?;
    let n = params.dim;
    let mut out = Vec::with_capacity(params.lambda);
    for _ in 0..params.lambda {
        let mut attempt = 0;
        let x = loop {
            let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let mut x = &state.mean + state.cov.sqrt_mul(&z) * state.sigma;
            attempt += 1;
            if params.in_bounds(&x) {
                break x;
            }
            if attempt > MAX_RESAMPLES {
                params.clamp(&mut x);
                break x;
            }
        };
        out.push(x);
    }
    Ok(out)
}

/// Stable ascending sort by fitness; ties keep candidate order.
pub fn rank_population(
    candidates: Vec<DVector<f64>>,
    fitnesses: Vec<f64>,
) -> Result<EvaluatedPopulation, CmaError> {
    if candidates.len() != fitnesses.len() {
        return Err(CmaError::LengthMismatch {
            candidates: candidates.len(),
            fitnesses: fitnesses.len(),
        });
    }
    if let Some((index, value)) = fitnesses
        .iter()
        .enumerate()
        .find(|(_, f)| !f.is_finite())
    {
        return Err(CmaError::NonFiniteFitness {
            index,
            value: *value,
        });
    }
    let mut order: Vec<usize> = (0..fitnesses.len()).collect();
    order.sort_by(|a, b| fitnesses[*a].total_cmp(&fitnesses[*b]));
    Ok(EvaluatedPopulation {
        candidates,
        fitnesses,
        order,
    })
}

/// `m + c_m Σ wᵢ (x_{i:λ} − m)`.
pub fn update_mean(
    state: &CmaState,
    params: &CmaParams,
    ranked: &EvaluatedPopulation,
) -> DVector<f64> {
    let mut shift = DVector::zeros(params.dim);
    for (i, w) in params.weights.iter().enumerate() {
        shift += (ranked.ranked(i) - &state.mean) * *w;
    }
    &state.mean + shift * params.c_m
}

/// Conjugate (step-size) evolution path.
pub fn update_conjugate_path(
    state: &CmaState,
    params: &CmaParams,
    ranked: &EvaluatedPopulation,
) -> Result<DVector<f64>, CmaError> {
    state.cov.check()?;
    let cs = params.c_sigma;
    let y_w = ranked.weighted_step(state, params);
    let gain = (cs * (2.0 - cs) * params.mu_eff()).sqrt();
    Ok(&state.p_sigma * (1.0 - cs) + state.cov.inv_sqrt_mul(&y_w) * gain)
}

/// `E‖N(0, I)‖ ≈ √n (1 − 1/(4n) + 1/(21n²))`.
pub fn expected_standard_norm(n: usize) -> f64 {
    let n = n as f64;
    n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n))
}

/// Returns 1 while the conjugate path is short enough to let the cumulative
/// path update, 0 otherwise. `generation` is the index before the update.
pub fn heaviside_stall(p_sigma_next: &DVector<f64>, c_sigma: f64, generation: u64, n: usize) -> u8 {
    let exponent = 2.0 * (generation as f64 + 1.0);
    let normalizer = (1.0 - (1.0 - c_sigma).powf(exponent)).sqrt();
    let threshold = (1.4 + 2.0 / (n as f64 + 1.0)) * expected_standard_norm(n);
    if p_sigma_next.norm() / normalizer < threshold {
        1
    } else {
        0
    }
}

pub fn update_step_size(state: &CmaState, params: &CmaParams, p_sigma_next: &DVector<f64>) -> f64 {
    let raw = (params.c_sigma / params.d_sigma)
        * (p_sigma_next.norm() / params.expected_norm() - 1.0);
    let exponent = raw.clamp(-STEP_EXPONENT_LIMIT, STEP_EXPONENT_LIMIT);
    if exponent != raw {
        log::warn!("step-size exponent {raw} clamped to {exponent}");
    }
    state.sigma * exponent.exp()
}

/// Limits the largest sampling standard deviation `σ √λ_max(C)` to the
/// widest box edge.
pub fn cap_step_size(params: &CmaParams, cov: &Covariance, sigma: f64) -> f64 {
    let width = params
        .lower
        .iter()
        .zip(&params.upper)
        .map(|(l, u)| u - l)
        .fold(0.0, f64::max);
    let spread = cov.eigenvalues.max().sqrt();
    if sigma * spread > width {
        width / spread
    } else {
        sigma
    }
}

/// Cumulative (covariance) evolution path.
pub fn update_cumulative_path(
    state: &CmaState,
    params: &CmaParams,
    ranked: &EvaluatedPopulation,
    h_sigma: u8,
) -> DVector<f64> {
    let cc = params.c_c;
    let decayed = &state.p_c * (1.0 - cc);
    if h_sigma == 0 {
        return decayed;
    }
    let y_w = ranked.weighted_step(state, params);
    decayed + y_w * (cc * (2.0 - cc) * params.mu_eff()).sqrt()
}

/// Rank-one plus rank-μ covariance update.
pub fn update_covariance(
    state: &CmaState,
    params: &CmaParams,
    ranked: &EvaluatedPopulation,
    p_c_next: &DVector<f64>,
    h_sigma: u8,
) -> Result<Covariance, CmaError> {
    let (c1, cmu, cc) = (params.c_1, params.c_mu, params.c_c);
    let delta = (1.0 - h_sigma as f64) * cc * (2.0 - cc);
    let mut next = &state.cov.matrix * (1.0 + c1 * delta - c1 - cmu);
    next += p_c_next * p_c_next.transpose() * c1;
    if state.sigma > 0.0 {
        for (i, w) in params.weights.iter().enumerate() {
            let y = (ranked.ranked(i) - &state.mean) / state.sigma;
            next += &y * y.transpose() * (cmu * w);
        }
    }
    Covariance::from_matrix(next).map(Covariance::clip_condition)
}

/// One full generation update. The input state is never modified.
pub fn step(
    state: &CmaState,
    params: &CmaParams,
    ranked: &EvaluatedPopulation,
) -> Result<CmaState, CmaError> {
    if ranked.len() != params.lambda {
        return Err(CmaError::LengthMismatch {
            candidates: ranked.len(),
            fitnesses: params.lambda,
        });
    }
    let mean = update_mean(state, params, ranked);
    let p_sigma = update_conjugate_path(state, params, ranked)?;
    let sigma = update_step_size(state, params, &p_sigma);
    let h_sigma = heaviside_stall(&p_sigma, params.c_sigma, state.generation, params.dim);
    let p_c = update_cumulative_path(state, params, ranked, h_sigma);
    let cov = update_covariance(state, params, ranked, &p_c, h_sigma)?;
    let sigma = cap_step_size(params, &cov, sigma);
    Ok(CmaState {
        mean,
        cov,
        sigma,
        p_c,
        p_sigma,
        generation: state.generation + 1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveRecord<M = ()> {
    pub generation: u64,
    pub candidate: Vec<f64>,
    pub fitness: f64,
    pub timestamp: f64,
    pub info: M,
}

/// Append-only record of every evaluated sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleArchive<M = ()> {
    records: Vec<ArchiveRecord<M>>,
}

impl<M> Default for SampleArchive<M> {
    fn default() -> Self {
        Self {
            records: Vec::new(),
        }
    }
}

impl<M> SampleArchive<M> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: ArchiveRecord<M>) -> Result<(), CmaError> {
        if let Some(last) = self.records.last() {
            if record.generation < last.generation {
                return Err(CmaError::GenerationOrder {
                    got: record.generation,
                    last: last.generation,
                });
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[ArchiveRecord<M>] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Index and record of the lowest fitness; the earliest record wins ties.
pub fn best_so_far<M>(archive: &SampleArchive<M>) -> Result<(usize, &ArchiveRecord<M>), CmaError> {
    let mut best: Option<(usize, &ArchiveRecord<M>)> = None;
    for (i, r) in archive.records.iter().enumerate() {
        match best {
            Some((_, b)) if r.fitness >= b.fitness => {}
            _ => best = Some((i, r)),
        }
    }
    best.ok_or(CmaError::EmptyArchive)
}

/// Ask/tell driver owning parameters, state, generator and archive.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CmaEs {
    pub params: CmaParams,
    pub state: CmaState,
    pub rng: ChaCha8Rng,
    pub archive: SampleArchive,
}

impl CmaEs {
    pub fn new(params: CmaParams, seed: u64) -> Result<Self, CmaError> {
        params.validate()?;
        Ok(Self {
            state: CmaState::new(&params),
            params,
            rng: ChaCha8Rng::seed_from_u64(seed),
            archive: SampleArchive::new(),
        })
    }

    pub fn ask(&mut self) -> Result<Vec<DVector<f64>>, CmaError> {
        sample_population(&self.state, &self.params, &mut self.rng)
    }

    pub fn tell(&mut self, candidates: Vec<DVector<f64>>, fitnesses: Vec<f64>) -> Result<(), CmaError> {
        let ranked = rank_population(candidates, fitnesses)?;
        let next = step(&self.state, &self.params, &ranked)?;
        for (x, f) in ranked.candidates.iter().zip(&ranked.fitnesses) {
            self.archive.push(ArchiveRecord {
                generation: self.state.generation,
                candidate: x.iter().copied().collect(),
                fitness: *f,
                timestamp: self.state.generation as f64,
                info: (),
            })?;
        }
        self.state = next;
        Ok(())
    }

    /// Runs one generation against `f`.
    pub fn generation<F: FnMut(&[f64]) -> f64>(&mut self, f: &mut F) -> Result<(), CmaError> {
        let xs = self.ask()?;
        let fs = xs.iter().map(|x| f(x.as_slice())).collect();
        self.tell(xs, fs)
    }
}
