//! Continuous-state process models: Gaussian and lognormal.
//!
//! A Gaussian model over `T` stages with `D` coordinates per stage is the law
//! N(mu, Sigma) of the stacked path vector, stage-major: entry `t*D + d` is
//! coordinate `d` at stage `t`. Conditioning a stage (or the whole tail
//! `t..=T`) on a realized history is exact Schur-complement algebra,
//!
//! ```text
//! xi_t | xi^{t-1} = x  ~  N( mu_t + B_t (x - mu^{t-1}),  S_t ),
//! B_t = Sigma_{th} Sigma_{hh}^{-1},   S_t = Sigma_{tt} - B_t Sigma_{ht},
//! ```
//!
//! and the conditional covariance `S_t` does not depend on the history, so
//! every conditioner (regression matrix, covariance, Cholesky factor) is
//! precomputed once when the model is built. The spectral norm of `B_t` is
//! the Lipschitz constant of the conditional law in the history argument,
//! which feeds the distance bounds.
//!
//! Lognormal models wrap a Gaussian core: paths are `exp` of Gaussian paths
//! coordinate-wise and conditioning happens in log space.
//!
//! The module also carries the scalar quantile / left-tail-average evaluators
//! (`V@R`, `AV@R` with `AV@R_b(X) = E[X | X <= V@R_b(X)]` realized through
//! closed forms) used by the inventory oracles.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::normal;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid covariance: {0}")]
    Covariance(String),
    #[error("sub-covariance ahead of stage {stage} is numerically singular")]
    SingularSubCovariance { stage: usize },
    #[error("quantile level must lie strictly inside (0, 1), got {0}")]
    BetaOutOfRange(f64),
    #[error("invalid history: {0}")]
    History(String),
    #[error("model JSON: {0}")]
    Json(String),
}

const SYMMETRY_TOL: f64 = 1e-12;

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Largest singular value; 0 for an empty matrix.
fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    let sv = m.clone().singular_values();
    sv.iter().cloned().fold(0.0, f64::max)
}

/// Clamp the eigenvalues of (the symmetric part of) `m` to at least `floor`.
/// Returns the repaired matrix and whether any eigenvalue was below the floor.
pub fn clip_to_psd(m: &DMatrix<f64>, floor: f64) -> (DMatrix<f64>, bool) {
    let sym = symmetrize(m);
    let eig = sym.clone().symmetric_eigen();
    let needs_clip = eig.eigenvalues.iter().any(|&l| l < floor);
    if !needs_clip {
        return (sym, false);
    }
    let clamped = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| l.max(floor)),
    );
    let rebuilt =
        &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    (symmetrize(&rebuilt), true)
}

// ---------------------------------------------------------------------------
// conditioning machinery
// ---------------------------------------------------------------------------

/// One precomputed Schur-complement conditioner: the law of the `tail_len`
/// entries starting at `head_len`, given the leading `head_len` entries.
#[derive(Debug, Clone)]
struct Conditioner {
    head_len: usize,
    regression: DMatrix<f64>,
    mean_head: DVector<f64>,
    mean_tail: DVector<f64>,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    lipschitz: f64,
}

impl Conditioner {
    fn build(
        mean: &DVector<f64>,
        cov: &DMatrix<f64>,
        head_len: usize,
        tail_len: usize,
        stage: usize,
    ) -> Result<Self, ModelError> {
        let mean_head = DVector::from_iterator(head_len, (0..head_len).map(|i| mean[i]));
        let mean_tail =
            DVector::from_iterator(tail_len, (0..tail_len).map(|i| mean[head_len + i]));
        let tail_block = cov.view((head_len, head_len), (tail_len, tail_len)).into_owned();
        let (regression, cond_cov) = if head_len == 0 {
            (DMatrix::zeros(tail_len, 0), tail_block)
        } else {
            let head_block = cov.view((0, 0), (head_len, head_len)).into_owned();
            let cross = cov.view((0, head_len), (head_len, tail_len)).into_owned();
            let head_chol = nalgebra::Cholesky::new(head_block)
                .ok_or(ModelError::SingularSubCovariance { stage })?;
            // B^T = Sigma_hh^{-1} Sigma_ht
            let regression = head_chol.solve(&cross).transpose();
            let cond = symmetrize(&(tail_block - &regression * cross));
            (regression, cond)
        };
        let chol = nalgebra::Cholesky::new(cond_cov.clone())
            .ok_or(ModelError::SingularSubCovariance { stage })?
            .l();
        let lipschitz = spectral_norm(&regression);
        Ok(Conditioner {
            head_len,
            regression,
            mean_head,
            mean_tail,
            cov: cond_cov,
            chol,
            lipschitz,
        })
    }

    fn apply(&self, history: &[f64]) -> Result<ConditionalGaussian, ModelError> {
        if history.len() != self.head_len {
            return Err(ModelError::History(format!(
                "expected {} conditioning values, got {}",
                self.head_len,
                history.len()
            )));
        }
        let x = DVector::from_column_slice(history);
        let mean = &self.mean_tail + &self.regression * (x - &self.mean_head);
        Ok(ConditionalGaussian {
            mean,
            cov: self.cov.clone(),
            chol: self.chol.clone(),
        })
    }
}

/// A Gaussian law produced by conditioning: mean, covariance, and a ready
/// Cholesky factor for sampling.
#[derive(Debug, Clone)]
pub struct ConditionalGaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
}

impl ConditionalGaussian {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Mean and variance of coordinate `i`.
    pub fn marginal(&self, i: usize) -> (f64, f64) {
        (self.mean[i], self.cov[(i, i)])
    }

    /// Scalar view; `None` unless one-dimensional.
    pub fn as_scalar(&self) -> Option<ScalarDistribution> {
        if self.dim() == 1 {
            Some(ScalarDistribution::Gaussian {
                mean: self.mean[0],
                sd: self.cov[(0, 0)].max(0.0).sqrt(),
            })
        } else {
            None
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let z = DVector::from_iterator(
            self.dim(),
            (0..self.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)),
        );
        (&self.mean + &self.chol * z).iter().cloned().collect()
    }

    /// Deterministic affine image `mean + L z` of a standard-normal vector;
    /// lets callers drive many conditionals with common random numbers.
    pub fn push_standard(&self, z: &[f64]) -> Vec<f64> {
        let z = DVector::from_column_slice(z);
        (&self.mean + &self.chol * z).iter().cloned().collect()
    }

    /// Condition this law's trailing coordinates on its leading `k`
    /// coordinates taking the value `x` (tower steps in tests and bounds).
    pub fn condition_leading(&self, k: usize, x: &[f64]) -> Result<ConditionalGaussian, ModelError> {
        if k >= self.dim() {
            return Err(ModelError::Dimension(format!(
                "cannot condition {} of {} coordinates",
                k,
                self.dim()
            )));
        }
        let inner = Conditioner::build(&self.mean, &self.cov, k, self.dim() - k, 0)?;
        inner.apply(x)
    }
}

// ---------------------------------------------------------------------------
// Gaussian model
// ---------------------------------------------------------------------------

/// Multivariate Gaussian process over `stages` stages with `dim` coordinates
/// per stage; the stacked path vector has length `dim * stages`.
#[derive(Debug, Clone)]
pub struct GaussianProcessModel {
    dim: usize,
    stages: usize,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    /// Present when the model was built from a T x T time covariance shared
    /// by independent coordinates; kept for round-trippable serialization.
    time_cov: Option<DMatrix<f64>>,
    chol: DMatrix<f64>,
    stage_cond: Vec<Conditioner>,
    tail_cond: Vec<Conditioner>,
}

impl GaussianProcessModel {
    /// Build from the full `(D*T) x (D*T)` covariance.
    pub fn full(
        dim: usize,
        stages: usize,
        mean: &[f64],
        cov: DMatrix<f64>,
    ) -> Result<Self, ModelError> {
        Self::build(dim, stages, mean, cov, None)
    }

    /// Build `dim` mutually independent coordinates sharing one `T x T` time
    /// covariance.
    pub fn shared_time(
        dim: usize,
        stages: usize,
        mean: &[f64],
        time_cov: DMatrix<f64>,
    ) -> Result<Self, ModelError> {
        if time_cov.nrows() != stages || time_cov.ncols() != stages {
            return Err(ModelError::Dimension(format!(
                "time covariance must be {stages} x {stages}, got {} x {}",
                time_cov.nrows(),
                time_cov.ncols()
            )));
        }
        let full = time_cov.kronecker(&DMatrix::identity(dim, dim));
        Self::build(dim, stages, mean, full, Some(time_cov))
    }

    fn build(
        dim: usize,
        stages: usize,
        mean: &[f64],
        cov: DMatrix<f64>,
        time_cov: Option<DMatrix<f64>>,
    ) -> Result<Self, ModelError> {
        if dim == 0 || stages == 0 {
            return Err(ModelError::Dimension(
                "dimension and stage count must be positive".into(),
            ));
        }
        let n = dim * stages;
        if mean.len() != n {
            return Err(ModelError::Dimension(format!(
                "mean length {} != D*T = {}",
                mean.len(),
                n
            )));
        }
        if cov.nrows() != n || cov.ncols() != n {
            return Err(ModelError::Dimension(format!(
                "covariance must be {n} x {n}, got {} x {}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        let skew = max_asymmetry(&cov);
        if skew > SYMMETRY_TOL {
            return Err(ModelError::Covariance(format!(
                "asymmetry {skew:.3e} exceeds {SYMMETRY_TOL:.0e}"
            )));
        }
        let cov = symmetrize(&cov);
        let chol = nalgebra::Cholesky::new(cov.clone())
            .ok_or_else(|| ModelError::Covariance("not positive-definite".into()))?
            .l();
        let mean = DVector::from_column_slice(mean);
        let mut stage_cond = Vec::with_capacity(stages);
        let mut tail_cond = Vec::with_capacity(stages);
        for t in 1..=stages {
            let head = (t - 1) * dim;
            stage_cond.push(Conditioner::build(&mean, &cov, head, dim, t)?);
            tail_cond.push(Conditioner::build(&mean, &cov, head, n - head, t)?);
        }
        Ok(GaussianProcessModel {
            dim,
            stages,
            mean,
            cov,
            time_cov,
            chol,
            stage_cond,
            tail_cond,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn stages(&self) -> usize {
        self.stages
    }

    pub fn path_len(&self) -> usize {
        self.dim * self.stages
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn time_covariance(&self) -> Option<&DMatrix<f64>> {
        self.time_cov.as_ref()
    }

    fn check_stage(&self, t: usize) -> Result<(), ModelError> {
        if t == 0 || t > self.stages {
            Err(ModelError::Dimension(format!(
                "stage {t} outside 1..={}",
                self.stages
            )))
        } else {
            Ok(())
        }
    }

    /// Law of stage `t` (1-based) given the stacked history of stages
    /// `1..t` (length `(t-1)*D`).
    pub fn conditional(
        &self,
        t: usize,
        history: &[f64],
    ) -> Result<ConditionalGaussian, ModelError> {
        self.check_stage(t)?;
        self.stage_cond[t - 1].apply(history)
    }

    /// Joint law of stages `t..=T` given the same history.
    pub fn joint_tail_conditional(
        &self,
        t: usize,
        history: &[f64],
    ) -> Result<ConditionalGaussian, ModelError> {
        self.check_stage(t)?;
        self.tail_cond[t - 1].apply(history)
    }

    /// Scalar stage conditional; only for `D == 1`.
    pub fn scalar_conditional(
        &self,
        t: usize,
        history: &[f64],
    ) -> Result<ScalarDistribution, ModelError> {
        if self.dim != 1 {
            return Err(ModelError::Dimension(format!(
                "scalar conditional needs D = 1, model has D = {}",
                self.dim
            )));
        }
        Ok(self
            .conditional(t, history)?
            .as_scalar()
            .expect("one-dimensional by construction"))
    }

    /// One joint draw of the whole path (stage-major layout).
    pub fn sample_path(&self, rng: &mut impl Rng) -> Vec<f64> {
        let n = self.path_len();
        let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        (&self.mean + &self.chol * z).iter().cloned().collect()
    }

    /// Per-stage conditional-law Lipschitz constants in the history argument
    /// (stages `2..=T`): the spectral norm of each stage's regression matrix,
    /// `|C_{t-1}^{-1} c^t|` in the scalar case.
    pub fn lipschitz_constants(&self) -> Vec<f64> {
        (2..=self.stages)
            .map(|t| self.stage_cond[t - 1].lipschitz)
            .collect()
    }

    /// Same, for the joint tails `t..=T` (tails starting at stages `2..=T`).
    pub fn tail_lipschitz_constants(&self) -> Vec<f64> {
        (2..=self.stages)
            .map(|t| self.tail_cond[t - 1].lipschitz)
            .collect()
    }

    pub fn to_json(&self) -> String {
        model_json(self, "gaussian")
    }
}

///// Draw a model with scale-proportional mean and time covariance: each stage
/// mean is its own `U[0, scale]^D` draw, the `T x T` time covariance has
/// `U[0, scale]` entries symmetrized and eigenvalue-clipped to at least 1e-6.
/// Returns the model and whether clipping occurred.
pub fn random_scaled_model(
    dim: usize,
    stages: usize,
    scale: f64,
    rng: &mut impl Rng,
) -> Result<(GaussianProcessModel, bool), ModelError> {
    let mean: Vec<f64> = (0..dim * stages)
        .map(|_| rng.random_range(0.0..scale))
        .collect();
    let mut time = DMatrix::zeros(stages, stages);
    for s in 0..stages {
        for t in s..stages {
            let v = rng.random_range(0.0..scale);
            time[(s, t)] = v;
            time[(t, s)] = v;
        }
    }
    let (time, clipped) = clip_to_psd(&time, 1e-6);
    let model = GaussianProcessModel::shared_time(dim, stages, &mean, time)?;
    Ok((model, clipped))
}

// ---------------------------------------------------------------------------
// lognormal model
// ---------------------------------------------------------------------------

/// Coordinate-wise `exp` of a Gaussian core; conditioning happens in log
/// space, so histories passed in demand space must be strictly positive.
#[derive(Debug, Clone)]
pub struct LognormalProcessModel {
    core: GaussianProcessModel,
}

impl LognormalProcessModel {
    pub fn new(core: GaussianProcessModel) -> Self {
        LognormalProcessModel { core }
    }

    /// The log-space Gaussian core.
    pub fn core(&self) -> &GaussianProcessModel {
        &self.core
    }

    pub fn dim(&self) -> usize {
        self.core.dim()
    }

    pub fn stages(&self) -> usize {
        self.core.stages()
    }

    fn log_history(history: &[f64]) -> Result<Vec<f64>, ModelError> {
        history
            .iter()
            .map(|&x| {
                if x > 0.0 {
                    Ok(x.ln())
                } else {
                    Err(ModelError::History(format!(
                        "lognormal history values must be positive, got {x}"
                    )))
                }
            })
            .collect()
    }

    /// Log-space law of stage `t` given the demand-space history.
    pub fn conditional_log(
        &self,
        t: usize,
        history: &[f64],
    ) -> Result<ConditionalGaussian, ModelError> {
        self.core.conditional(t, &Self::log_history(history)?)
    }

    /// Log-space joint law of stages `t..=T` given the demand-space history.
    pub fn joint_tail_conditional_log(
        &self,
        t: usize,
        history: &[f64],
    ) -> Result<ConditionalGaussian, ModelError> {
        self.core
            .joint_tail_conditional(t, &Self::log_history(history)?)
    }

    /// Scalar demand-space conditional; only for `D == 1`.
    pub fn scalar_conditional(
        &self,
        t: usize,
        history: &[f64],
    ) -> Result<ScalarDistribution, ModelError> {
        match self.conditional_log(t, history)?.as_scalar() {
            Some(ScalarDistribution::Gaussian { mean, sd }) => Ok(ScalarDistribution::Lognormal {
                log_mean: mean,
                log_sd: sd,
            }),
            _ => Err(ModelError::Dimension(format!(
                "scalar conditional needs D = 1, model has D = {}",
                self.dim()
            ))),
        }
    }

    pub fn sample_path(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.core
            .sample_path(rng)
            .into_iter()
            .map(f64::exp)
            .collect()
    }

    /// Demand-space draw from the joint tail `t..=T` given a demand-space
    /// history.
    pub fn sample_tail(
        &self,
        t: usize,
        history: &[f64],
        rng: &mut impl Rng,
    ) -> Result<Vec<f64>, ModelError> {
        let tail = self.joint_tail_conditional_log(t, history)?;
        Ok(tail.sample(rng).into_iter().map(f64::exp).collect())
    }

    pub fn to_json(&self) -> String {
        model_json(&self.core, "lognormal")
    }
}

// ---------------------------------------------------------------------------
// either-kind wrapper + JSON
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum ProcessModel {
    Gaussian(GaussianProcessModel),
    Lognormal(LognormalProcessModel),
}

impl ProcessModel {
    pub fn dim(&self) -> usize {
        self.gaussian_core().dim()
    }

    pub fn stages(&self) -> usize {
        self.gaussian_core().stages()
    }

    pub fn is_lognormal(&self) -> bool {
        matches!(self, ProcessModel::Lognormal(_))
    }

    /// The Gaussian parameters (log-space parameters for a lognormal model).
    pub fn gaussian_core(&self) -> &GaussianProcessModel {
        match self {
            ProcessModel::Gaussian(g) => g,
            ProcessModel::Lognormal(l) => l.core(),
        }
    }

    pub fn sample_path(&self, rng: &mut impl Rng) -> Vec<f64> {
        match self {
            ProcessModel::Gaussian(g) => g.sample_path(rng),
            ProcessModel::Lognormal(l) => l.sample_path(rng),
        }
    }

    pub fn to_json(&self) -> String {
        match self {
            ProcessModel::Gaussian(g) => g.to_json(),
            ProcessModel::Lognormal(l) => l.to_json(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let raw: ModelJson =
            serde_json::from_str(text).map_err(|e| ModelError::Json(e.to_string()))?;
        let n = raw.dim * raw.stages;
        let rows = raw.cov.len();
        let square = raw.cov.iter().all(|r| r.len() == rows);
        if !square {
            return Err(ModelError::Json("covariance rows have uneven lengths".into()));
        }
        let flat: Vec<f64> = raw.cov.iter().flatten().cloned().collect();
        let core = if rows == n {
            let cov = DMatrix::from_row_slice(n, n, &flat);
            GaussianProcessModel::full(raw.dim, raw.stages, &raw.mean, cov)
        } else if rows == raw.stages && raw.dim > 1 {
            let cov = DMatrix::from_row_slice(raw.stages, raw.stages, &flat);
            GaussianProcessModel::shared_time(raw.dim, raw.stages, &raw.mean, cov)
        } else {
            return Err(ModelError::Json(format!(
                "covariance is {rows} x {rows}; expected {n} (full) or {} (shared time)",
                raw.stages
            )));
        }?;
        match raw.kind.as_str() {
            "gaussian" => Ok(ProcessModel::Gaussian(core)),
            "lognormal" => Ok(ProcessModel::Lognormal(LognormalProcessModel::new(core))),
            other => Err(ModelError::Json(format!("unknown model kind {other:?}"))),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ModelJson {
    kind: String,
    #[serde(rename = "D")]
    dim: usize,
    #[serde(rename = "T")]
    stages: usize,
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

fn model_json(core: &GaussianProcessModel, kind: &str) -> String {
    // serialize the shared time covariance when that is how the model was
    // built, so round trips preserve the layout
    let m = core.time_covariance().unwrap_or_else(|| core.covariance());
    let cov: Vec<Vec<f64>> = (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect();
    let raw = ModelJson {
        kind: kind.to_string(),
        dim: core.dim(),
        stages: core.stages(),
        mean: core.mean().iter().cloned().collect(),
        cov,
    };
    serde_json::to_string_pretty(&raw).expect("model serialization cannot fail")
}

// ---------------------------------------------------------------------------
// scalar quantile / left-tail average
// ---------------------------------------------------------------------------

/// A scalar demand law for the inventory oracles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ScalarDistribution {
    Gaussian { mean: f64, sd: f64 },
    Lognormal { log_mean: f64, log_sd: f64 },
}

fn check_beta(beta: f64) -> Result<(), ModelError> {
    if beta > 0.0 && beta < 1.0 {
        Ok(())
    } else {
        Err(ModelError::BetaOutOfRange(beta))
    }
}

/// `V@R_b(X) = F^{-1}(b)`.
pub fn var_quantile(dist: &ScalarDistribution, beta: f64) -> Result<f64, ModelError> {
    check_beta(beta)?;
    let z = normal::quantile(beta);
    Ok(match *dist {
        ScalarDistribution::Gaussian { mean, sd } => mean + sd * z,
        ScalarDistribution::Lognormal { log_mean, log_sd } => (log_mean + log_sd * z).exp(),
    })
}

/// Left-tail average `AV@R_b(X) = (1/b) * integral_0^b F^{-1}(u) du`.
pub fn avar(dist: &ScalarDistribution, beta: f64) -> Result<f64, ModelError> {
    check_beta(beta)?;
    let z = normal::quantile(beta);
    Ok(match *dist {
        ScalarDistribution::Gaussian { mean, sd } => mean - sd * normal::pdf(z) / beta,
        ScalarDistribution::Lognormal { log_mean, log_sd } => {
            // integral of exp(m + s u) dPhi(u) over u <= z is
            // exp(m + s^2/2) Phi(z - s)
            (log_mean + 0.5 * log_sd * log_sd).exp() * normal::cdf(z - log_sd) / beta
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn reference_model() -> GaussianProcessModel {
        let cov = DMatrix::from_row_slice(
            3,
            3,
            &[1.0, 0.3, 0.0, 0.3, 0.7, 0.3, 0.0, 0.3, 0.5],
        );
        GaussianProcessModel::full(1, 3, &[1.0, 2.0, 3.0], cov).unwrap()
    }

    #[test]
    fn scalar_conditioning_matches_hand_schur_complement() {
        let model = reference_model();
        for &x in &[0.0, 1.0, 1.7, -2.3] {
            let c = model.conditional(2, &[x]).unwrap();
            let (m, v) = c.marginal(0);
            assert!((m - (2.0 + 0.3 * (x - 1.0))).abs() < 1e-12, "mean at x={x}");
            assert!((v - 0.61).abs() < 1e-12);
        }
        // stage 3 given (1.0, 2.5): regression (1/0.61) (-0.09, 0.3)
        let c3 = model.conditional(3, &[1.0, 2.5]).unwrap();
        let (m3, v3) = c3.marginal(0);
        assert!((m3 - (3.0 + 0.3 / 0.61 * 0.5)).abs() < 1e-10);
        assert!((v3 - (0.5 - 0.09 / 0.61)).abs() < 1e-10);
        println!("stage-3 conditional: mean {m3:.6}, var {v3:.6}");
        // empty history reproduces the first marginal
        let c1 = model.conditional(1, &[]).unwrap();
        assert_eq!(c1.marginal(0), (1.0, 1.0));
    }

    #[test]
    fn lipschitz_constants_hand_checked_and_scale_free() {
        let model = reference_model();
        let k = model.lipschitz_constants();
        assert_eq!(k.len(), 2);
        assert!((k[0] - 0.3).abs() < 1e-12);
        assert!((k[1] - 0.5134576972).abs() < 1e-9);
        let tail_k = model.tail_lipschitz_constants();
        assert_eq!(tail_k.len(), 2);
        // tail starting at the last stage is the plain stage constant
        assert!((tail_k[1] - k[1]).abs() < 1e-12);

        let scaled = GaussianProcessModel::full(
            1,
            3,
            &[1.0, 2.0, 3.0],
            model.covariance() * 7.3,
        )
        .unwrap();
        for (a, b) in k.iter().zip(scaled.lipschitz_constants()) {
            assert!((a - b).abs() < 1e-12);
        }

        let diag = GaussianProcessModel::full(
            1,
            3,
            &[0.0; 3],
            DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 3.0])),
        )
        .unwrap();
        assert!(diag.lipschitz_constants().iter().all(|&x| x == 0.0));
        let c = diag.conditional(3, &[5.0, -4.0]).unwrap();
        assert_eq!(c.marginal(0), (0.0, 3.0));
    }

    #[test]
    fn tower_consistency_is_algebraically_exact() {
        // a full 2-coordinate, 3-stage model with cross correlations
        let mut rng = stream_rng(99, 0);
        let n = 6;
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let cov = &a * a.transpose() + DMatrix::identity(n, n) * 0.5;
        let mean: Vec<f64> = (0..n).map(|i| i as f64 * 0.7 - 1.0).collect();
        let model = GaussianProcessModel::full(2, 3, &mean, cov).unwrap();

        let history = [0.4, -0.9];
        let tail = model.joint_tail_conditional(2, &history).unwrap();
        let stage = model.conditional(2, &history).unwrap();
        for i in 0..2 {
            let (tm, tv) = tail.marginal(i);
            let (sm, sv) = stage.marginal(i);
            assert!((tm - sm).abs() < 1e-10);
            assert!((tv - sv).abs() < 1e-10);
        }
        // conditioning the tail on its own first stage = direct conditioning
        let x2 = [0.1, 0.2];
        let chained = tail.condition_leading(2, &x2).unwrap();
        let direct = model
            .conditional(3, &[history[0], history[1], x2[0], x2[1]])
            .unwrap();
        for i in 0..2 {
            let (cm, cv) = chained.marginal(i);
            let (dm, dv) = direct.marginal(i);
            assert!((cm - dm).abs() < 1e-10, "coord {i}: {cm} vs {dm}");
            assert!((cv - dv).abs() < 1e-10);
        }
        // t = 1 tail is the unconditional joint
        let whole = model.joint_tail_conditional(1, &[]).unwrap();
        assert!((whole.mean() - model.mean()).norm() < 1e-14);
        assert!((whole.covariance() - model.covariance()).norm() < 1e-14);
    }

    #[test]
    fn joint_tail_marginals_match_monte_carlo_chaining() {
        let model = reference_model();
        let tail = model.joint_tail_conditional(2, &[1.0]).unwrap();
        let mut rng = stream_rng(7, 1);
        let n = 1_000_000usize;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..n {
            let x2 = model.conditional(2, &[1.0]).unwrap().sample(&mut rng)[0];
            let m3 = model.conditional(3, &[1.0, x2]).unwrap().marginal(0).0;
            sum += m3;
            sum_sq += m3 * m3;
        }
        let mc_mean = sum / n as f64;
        let mc_sd = (sum_sq / n as f64 - mc_mean * mc_mean).sqrt();
        let se = mc_sd / (n as f64).sqrt();
        let (m, _) = tail.marginal(1);
        println!("tail stage-3 mean {m:.5}, chained MC {mc_mean:.5} (se {se:.2e})");
        assert!((mc_mean - m).abs() < 3.0 * se + 1e-12);
    }

    #[test]
    fn path_sampling_matches_model_moments() {
        let model = reference_model();
        let mut rng = stream_rng(21, 0);
        let n = 100_000usize;
        let mut mean_acc = [0.0f64; 3];
        let mut cov_acc = [[0.0f64; 3]; 3];
        for _ in 0..n {
            let p = model.sample_path(&mut rng);
            for s in 0..3 {
                mean_acc[s] += p[s];
                for t in 0..3 {
                    cov_acc[s][t] += (p[s] - model.mean()[s]) * (p[t] - model.mean()[t]);
                }
            }
        }
        for s in 0..3 {
            let se = (model.covariance()[(s, s)] / n as f64).sqrt();
            assert!(
                (mean_acc[s] / n as f64 - model.mean()[s]).abs() < 4.0 * se,
                "stage {s} mean off"
            );
            for t in 0..3 {
                let (css, ctt, cst) = (
                    model.covariance()[(s, s)],
                    model.covariance()[(t, t)],
                    model.covariance()[(s, t)],
                );
                let se = ((css * ctt + cst * cst) / n as f64).sqrt();
                assert!(
                    (cov_acc[s][t] / n as f64 - cst).abs() < 5.0 * se,
                    "cov ({s},{t}) off"
                );
            }
        }
    }

    #[test]
    fn near_degenerate_covariance_concentrates_on_the_mean() {
        let eps = 1e-12;
        let model = GaussianProcessModel::full(
            1,
            4,
            &[3.0, 1.0, 4.0, 1.5],
            DMatrix::identity(4, 4) * eps,
        )
        .unwrap();
        let mut rng = stream_rng(3, 3);
        let p = model.sample_path(&mut rng);
        for (x, m) in p.iter().zip(model.mean().iter()) {
            assert!((x - m).abs() < 5.0 * eps.sqrt());
        }
    }

    #[test]
    fn lognormal_paths_are_exponentials_of_the_core_paths() {
        let model = reference_model();
        let log = LognormalProcessModel::new(model.clone());
        let mut r1 = stream_rng(11, 4);
        let mut r2 = stream_rng(11, 4);
        let g = model.sample_path(&mut r1);
        let l = log.sample_path(&mut r2);
        for (a, b) in g.iter().zip(&l) {
            assert_eq!(a.exp().to_bits(), b.to_bits());
        }
        // conditioning takes demand-space histories through the log
        let demand_history = [g[0].exp()];
        let via_log = log.conditional_log(2, &demand_history).unwrap();
        let direct = model.conditional(2, &[g[0]]).unwrap();
        assert!((via_log.mean()[0] - direct.mean()[0]).abs() < 1e-12);
        assert!(log.conditional_log(2, &[-0.5]).is_err());
        match log.scalar_conditional(2, &demand_history).unwrap() {
            ScalarDistribution::Lognormal { log_sd, .. } => {
                assert!((log_sd - 0.61f64.sqrt()).abs() < 1e-12)
            }
            other => panic!("expected lognormal scalar, got {other:?}"),
        }
    }

    #[test]
    fn shared_time_coordinates_are_independent_copies() {
        let time = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 0.9]);
        let mean = [10.0, 20.0, 11.0, 21.0];
        let model = GaussianProcessModel::shared_time(2, 2, &mean, time.clone()).unwrap();
        let scalar0 = GaussianProcessModel::full(1, 2, &[10.0, 11.0], time.clone()).unwrap();
        let history = [9.0, 23.5];
        let joint = model.conditional(2, &history).unwrap();
        let solo = scalar0.conditional(2, &[history[0]]).unwrap();
        assert!((joint.marginal(0).0 - solo.marginal(0).0).abs() < 1e-12);
        assert!((joint.marginal(0).1 - solo.marginal(0).1).abs() < 1e-12);
        // no cross-coordinate covariance in the conditional
        assert!(joint.covariance()[(0, 1)].abs() < 1e-14);
        // moving the other coordinate's history leaves this coordinate alone
        let moved = model.conditional(2, &[history[0], -4.0]).unwrap();
        assert!((moved.marginal(0).0 - joint.marginal(0).0).abs() < 1e-14);
    }

    #[test]
    fn risk_functionals_match_quadrature_and_closed_forms() {
        let std_normal = ScalarDistribution::Gaussian { mean: 0.0, sd: 1.0 };
        assert!(var_quantile(&std_normal, 0.5).unwrap().abs() < 1e-12);
        let a = avar(&std_normal, 0.5).unwrap();
        assert!((a + (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-12);

        let log01 = ScalarDistribution::Lognormal { log_mean: 0.0, log_sd: 1.0 };
        assert!((var_quantile(&log01, 0.5).unwrap() - 1.0).abs() < 1e-12);

        // quadrature oracle: AV@R_b = (1/b) * integral of F^{-1}(Phi(z)) dPhi(z)
        // over z <= Phi^{-1}(b), Simpson in z-space
        let quad = |dist: &ScalarDistribution, beta: f64| {
            let hi = normal::quantile(beta);
            let lo = -10.0;
            let n = 40_000usize;
            let h = (hi - lo) / n as f64;
            let f = |z: f64| {
                let x = match *dist {
                    ScalarDistribution::Gaussian { mean, sd } => mean + sd * z,
                    ScalarDistribution::Lognormal { log_mean, log_sd } => {
                        (log_mean + log_sd * z).exp()
                    }
                };
                x * normal::pdf(z)
            };
            let mut s = f(lo) + f(hi);
            for i in 1..n {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                s += w * f(lo + i as f64 * h);
            }
            s * h / 3.0 / beta
        };
        for (dist, beta) in [
            (ScalarDistribution::Gaussian { mean: 2.0, sd: 1.5 }, 0.3),
            (log01, 0.3),
            (ScalarDistribution::Gaussian { mean: -1.0, sd: 0.2 }, 0.85),
            (ScalarDistribution::Lognormal { log_mean: 0.5, log_sd: 0.4 }, 0.6),
        ] {
            let closed = avar(&dist, beta).unwrap();
            let numeric = quad(&dist, beta);
            println!("avar {dist:?} beta {beta}: closed {closed:.8}, quad {numeric:.8}");
            assert!((closed - numeric).abs() < 1e-8);
            assert!(closed <= var_quantile(&dist, beta).unwrap() + 1e-12);
        }
        assert!(matches!(
            avar(&std_normal, 0.0),
            Err(ModelError::BetaOutOfRange(_))
        ));
        assert!(matches!(
            var_quantile(&std_normal, 1.0),
            Err(ModelError::BetaOutOfRange(_))
        ));
    }

    #[test]
    fn psd_clipping_repairs_indefinite_matrices_only() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.99, 0.99, 0.5]);
        let (fixed, clipped) = clip_to_psd(&bad, 1e-6);
        assert!(clipped);
        assert!(nalgebra::Cholesky::new(fixed.clone()).is_some());
        let eig = fixed.symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&l| l >= 1e-6 - 1e-12));

        let good = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
        let (same, clipped) = clip_to_psd(&good, 1e-6);
        assert!(!clipped);
        assert_eq!(same, good);
    }

    #[test]
    fn json_round_trips_preserve_layout_and_bits() {
        let time = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 0.9]);
        let shared = GaussianProcessModel::shared_time(
            3,
            2,
            &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
            time,
        )
        .unwrap();
        let text = ProcessModel::Gaussian(shared.clone()).to_json();
        let back = ProcessModel::from_json(&text).unwrap();
        assert_eq!(back.dim(), 3);
        assert!(back.gaussian_core().time_covariance().is_some());
        assert_eq!(back.gaussian_core().covariance(), shared.covariance());

        let log = ProcessModel::Lognormal(LognormalProcessModel::new(reference_model()));
        let back = ProcessModel::from_json(&log.to_json()).unwrap();
        assert!(back.is_lognormal());
        assert_eq!(
            back.gaussian_core().covariance(),
            reference_model().covariance()
        );

        assert!(ProcessModel::from_json("{\"kind\": \"fish\"}").is_err());
        let bad = "{\"kind\":\"gaussian\",\"D\":1,\"T\":2,\"mean\":[0,0],\"cov\":[[1,2],[2,1]]}";
        assert!(matches!(
            ProcessModel::from_json(bad),
            Err(ModelError::Covariance(_))
        ));
    }

    #[test]
    fn random_scaled_models_are_reproducible_and_valid() {
        let (a, _clipped_a) = random_scaled_model(4, 3, 30.0, &mut stream_rng(5, 9)).unwrap();
        let (b, _clipped_b) = random_scaled_model(4, 3, 30.0, &mut stream_rng(5, 9)).unwrap();
        assert_eq!(a.covariance(), b.covariance());
        assert_eq!(a.mean(), b.mean());
        assert_eq!(a.dim(), 4);
        assert_eq!(a.stages(), 3);
        // every stage draws its own mean in [0, scale]
        assert!(a.mean().iter().all(|&m| (0.0..=30.0).contains(&m)));
        assert!(a.mean().as_slice()[..4] != a.mean().as_slice()[4..8]);
        let mut clip_seen = false;
        for s in 0..40u64 {
            let (_, clipped) = random_scaled_model(3, 4, 20.0, &mut stream_rng(6, s)).unwrap();
            clip_seen |= clipped;
        }
        // random symmetric U[0,scale] matrices are usually indefinite
        assert!(clip_seen);
    }

    #[test]
    fn constructor_rejects_malformed_inputs() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.2, 1.0]);
        assert!(matches!(
            GaussianProcessModel::full(1, 2, &[0.0, 0.0], asym),
            Err(ModelError::Covariance(_))
        ));
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(GaussianProcessModel::full(1, 2, &[0.0, 0.0], singular).is_err());
        assert!(GaussianProcessModel::full(1, 2, &[0.0], DMatrix::identity(2, 2)).is_err());
        let model = reference_model();
        assert!(matches!(
            model.conditional(2, &[1.0, 2.0]),
            Err(ModelError::History(_))
        ));
        assert!(model.conditional(0, &[]).is_err());
        assert!(model.conditional(4, &[]).is_err());
    }
}
