//! Source models and distortion budgets.
//!
//! Two families of models are supported. A [`DiscreteSemanticSource`] is a
//! finite-alphabet pair `(S, X)` given by a joint pmf together with a state
//! distortion table on `S x Shat` and an observation distortion table on
//! `X x Xhat`. A [`GaussianSemanticModel`] is a zero-mean Gaussian
//! observation `X` with covariance `K_X`, whose state is the linear-plus-noise
//! image `S = H X + Z`; jointly Gaussian `(S, X)` pairs reduce to this form
//! through [`jointly_gaussian_to_linear`].
//!
//! Constructors validate their inputs once, so every solver in the crate can
//! assume well-formed models: pmfs are nonnegative and normalized with no
//! zero-probability observation symbol, covariance matrices are symmetric
//! (stored symmetrized) and definite where required, and distortion tables
//! are nonnegative and finite.

use nalgebra::DMatrix;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Real;

/// Absolute tolerance for pmf normalization.
fn pmf_tol<T: Real>() -> T {
    T::tol(1e-12)
}

/// Relative tolerance for symmetry checks.
fn sym_tol<T: Real>() -> T {
    T::tol(1e-12)
}

/// Relative eigenvalue floor separating "positive definite" from "singular".
fn pd_floor<T: Real>() -> T {
    T::tol(1e-10)
}

// ---------------------------------------------------------------------------
// discrete sources
// ---------------------------------------------------------------------------

/// Finite-alphabet source with a hidden state.
///
/// `joint_pmf[(s, x)]` is `P(S = s, X = x)`. The reproduction alphabets are
/// implied by the distortion tables: `d_s` has one column per state
/// reproduction letter, `d_o` one column per observation reproduction letter.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSemanticSource<T: Real> {
    joint_pmf: DMatrix<T>,
    d_s: DMatrix<T>,
    d_o: DMatrix<T>,
    obs_pmf: Vec<T>,
}

impl<T: Real> DiscreteSemanticSource<T> {
    /// Validates and builds a source.
    ///
    /// Rejects negative or non-normalized pmfs, observation symbols of zero
    /// probability, negative or non-finite distortion entries, and distortion
    /// tables whose row counts disagree with the pmf dimensions.
    pub fn new(joint_pmf: DMatrix<T>, d_s: DMatrix<T>, d_o: DMatrix<T>) -> Result<Self> {
        let (ns, nx) = joint_pmf.shape();
        if ns == 0 || nx == 0 {
            return Err(Error::DimensionMismatch("empty joint pmf".into()));
        }
        if d_s.nrows() != ns {
            return Err(Error::DimensionMismatch(format!(
                "state distortion table has {} rows, joint pmf has {} states",
                d_s.nrows(),
                ns
            )));
        }
        if d_o.nrows() != nx {
            return Err(Error::DimensionMismatch(format!(
                "observation distortion table has {} rows, joint pmf has {} observation symbols",
                d_o.nrows(),
                nx
            )));
        }
        if d_s.ncols() == 0 || d_o.ncols() == 0 {
            return Err(Error::DimensionMismatch(
                "empty reproduction alphabet".into(),
            ));
        }

        let mut total = T::zero();
        for &p in joint_pmf.iter() {
            if !p.finite() || p < T::zero() {
                return Err(Error::InvalidDistribution(format!(
                    "joint pmf entry {:e}",
                    p.as_f64()
                )));
            }
            total += p;
        }
        if (total - T::one()).abs() > pmf_tol::<T>() {
            return Err(Error::InvalidDistribution(format!(
                "joint pmf sums to {}",
                total.as_f64()
            )));
        }

        let mut obs_pmf = vec![T::zero(); nx];
        for x in 0..nx {
            for s in 0..ns {
                obs_pmf[x] += joint_pmf[(s, x)];
            }
            if obs_pmf[x] <= T::zero() {
                return Err(Error::ZeroProbabilityObservation { index: x });
            }
        }

        for (table, name) in [(&d_s, "state"), (&d_o, "observation")] {
            for j in 0..table.ncols() {
                for i in 0..table.nrows() {
                    let v = table[(i, j)];
                    if !v.finite() {
                        return Err(Error::InvalidArgument(format!(
                            "non-finite {name} distortion entry at ({i}, {j})"
                        )));
                    }
                    if v < T::zero() {
                        return Err(Error::NegativeDistortion {
                            row: i,
                            col: j,
                            value: v.as_f64(),
                        });
                    }
                }
            }
        }

        Ok(Self {
            joint_pmf,
            d_s,
            d_o,
            obs_pmf,
        })
    }

    /// Number of state symbols.
    pub fn n_states(&self) -> usize {
        self.joint_pmf.nrows()
    }

    /// Number of observation symbols.
    pub fn n_obs(&self) -> usize {
        self.joint_pmf.ncols()
    }

    /// Number of state reproduction letters.
    pub fn n_state_repr(&self) -> usize {
        self.d_s.ncols()
    }

    /// Number of observation reproduction letters.
    pub fn n_obs_repr(&self) -> usize {
        self.d_o.ncols()
    }

    /// Joint pmf of `(S, X)`.
    pub fn joint_pmf(&self) -> &DMatrix<T> {
        &self.joint_pmf
    }

    /// Marginal pmf of the observation.
    pub fn obs_pmf(&self) -> &[T] {
        &self.obs_pmf
    }

    /// Conditional probability `P(S = s | X = x)`.
    pub fn state_given_obs(&self, s: usize, x: usize) -> T {
        self.joint_pmf[(s, x)] / self.obs_pmf[x]
    }

    /// State distortion table on `S x Shat`.
    pub fn state_distortion(&self) -> &DMatrix<T> {
        &self.d_s
    }

    /// Observation distortion table on `X x Xhat`.
    pub fn obs_distortion(&self) -> &DMatrix<T> {
        &self.d_o
    }
}

/// Builds the source in which the state is a deterministic function of the
/// observation, `S = g(X)`.
///
/// `obs_pmf` must be strictly positive and normalized; `state_map[x]` selects
/// the state symbol for observation `x` and must index a row of `d_s`.
pub fn deterministic_state_source<T: Real>(
    obs_pmf: &[T],
    state_map: &[usize],
    d_s: DMatrix<T>,
    d_o: DMatrix<T>,
) -> Result<DiscreteSemanticSource<T>> {
    let nx = obs_pmf.len();
    if state_map.len() != nx {
        return Err(Error::DimensionMismatch(format!(
            "state map has {} entries for {} observation symbols",
            state_map.len(),
            nx
        )));
    }
    let ns = d_s.nrows();
    if let Some(&bad) = state_map.iter().find(|&&s| s >= ns) {
        return Err(Error::DimensionMismatch(format!(
            "state map value {bad} outside the {ns}-symbol state alphabet"
        )));
    }
    for (x, &p) in obs_pmf.iter().enumerate() {
        if !p.finite() || p <= T::zero() {
            return Err(Error::InvalidDistribution(format!(
                "observation pmf entry {} at index {x}",
                p.as_f64()
            )));
        }
    }
    let mut joint = DMatrix::zeros(ns, nx);
    for (x, (&s, &p)) in state_map.iter().zip(obs_pmf.iter()).enumerate() {
        joint[(s, x)] = p;
    }
    DiscreteSemanticSource::new(joint, d_s, d_o)
}

// ---------------------------------------------------------------------------
// Gaussian models
// ---------------------------------------------------------------------------

/// Zero-mean Gaussian observation with a linear-plus-noise state.
///
/// `X ~ N(0, K_X)` with `K_X` positive definite, and `S = H X + Z` with
/// `Z ~ N(0, K_Z)` independent of `X`. Matrices are stored symmetrized.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSemanticModel<T: Real> {
    obs_cov: DMatrix<T>,
    state_transform: DMatrix<T>,
    noise_cov: DMatrix<T>,
}

impl<T: Real> GaussianSemanticModel<T> {
    /// Validates and builds a model; see [`validate_gaussian_model`] for the
    /// conditions enforced.
    pub fn new(
        obs_cov: DMatrix<T>,
        state_transform: DMatrix<T>,
        noise_cov: DMatrix<T>,
    ) -> Result<Self> {
        let model = Self {
            obs_cov: linalg::symmetrize(&obs_cov),
            state_transform,
            noise_cov: linalg::symmetrize(&noise_cov),
        };
        validate_gaussian_model_raw(&obs_cov, &model.state_transform, &noise_cov)?;
        Ok(model)
    }

    /// Builds a model from the joint second moments of `(S, X)` via
    /// [`jointly_gaussian_to_linear`].
    pub fn from_joint(
        state_cov: &DMatrix<T>,
        cross_cov: &DMatrix<T>,
        obs_cov: &DMatrix<T>,
    ) -> Result<Self> {
        let (h, kz) = jointly_gaussian_to_linear(state_cov, cross_cov, obs_cov)?;
        Self::new(obs_cov.clone(), h, kz)
    }

    /// Observation dimension `m`.
    pub fn obs_dim(&self) -> usize {
        self.obs_cov.nrows()
    }

    /// State dimension `l`.
    pub fn state_dim(&self) -> usize {
        self.state_transform.nrows()
    }

    /// Observation covariance `K_X`.
    pub fn obs_cov(&self) -> &DMatrix<T> {
        &self.obs_cov
    }

    /// State transform `H`.
    pub fn state_transform(&self) -> &DMatrix<T> {
        &self.state_transform
    }

    /// State noise covariance `K_Z`.
    pub fn noise_cov(&self) -> &DMatrix<T> {
        &self.noise_cov
    }

    /// `tr K_Z`, the floor below which no state budget is achievable.
    pub fn noise_trace(&self) -> T {
        self.noise_cov.trace()
    }

    /// `tr K_X`, the observation distortion achieved at rate zero.
    pub fn obs_trace(&self) -> T {
        self.obs_cov.trace()
    }

    /// Gram matrix `H^T H` of the state transform.
    pub fn state_gram(&self) -> DMatrix<T> {
        linalg::symmetrize(&(self.state_transform.transpose() * &self.state_transform))
    }

    /// `tr(H K_X H^T)`, the excess state distortion at rate zero.
    pub fn state_image_trace(&self) -> T {
        (&self.state_transform * &self.obs_cov * self.state_transform.transpose()).trace()
    }
}

fn validate_gaussian_model_raw<T: Real>(
    obs_cov: &DMatrix<T>,
    state_transform: &DMatrix<T>,
    noise_cov: &DMatrix<T>,
) -> Result<()> {
    let m = obs_cov.nrows();
    if obs_cov.ncols() != m || m == 0 {
        return Err(Error::DimensionMismatch(format!(
            "observation covariance is {}x{}",
            obs_cov.nrows(),
            obs_cov.ncols()
        )));
    }
    let l = state_transform.nrows();
    if state_transform.ncols() != m || l == 0 {
        return Err(Error::DimensionMismatch(format!(
            "state transform is {}x{}, expected lx{m}",
            l,
            state_transform.ncols()
        )));
    }
    if noise_cov.shape() != (l, l) {
        return Err(Error::DimensionMismatch(format!(
            "noise covariance is {}x{}, expected {l}x{l}",
            noise_cov.nrows(),
            noise_cov.ncols()
        )));
    }
    for (mat, name) in [(obs_cov, "observation covariance"), (noise_cov, "noise covariance")] {
        if mat.iter().any(|v| !v.finite()) {
            return Err(Error::InvalidArgument(format!("non-finite entry in {name}")));
        }
        let scale = T::one().max(linalg::max_abs(mat));
        if linalg::asymmetry(mat) > sym_tol::<T>() * scale {
            return Err(Error::NonSymmetric(name.into()));
        }
    }
    if state_transform.iter().any(|v| !v.finite()) {
        return Err(Error::InvalidArgument(
            "non-finite entry in state transform".into(),
        ));
    }

    let (kx_min, kx_max) = linalg::eigenvalue_range(obs_cov);
    if kx_min <= pd_floor::<T>() * kx_max.max(T::one()) {
        return Err(Error::NotPositiveDefinite(format!(
            "observation covariance has eigenvalue {:e}",
            kx_min.as_f64()
        )));
    }
    let (kz_min, kz_max) = linalg::eigenvalue_range(noise_cov);
    if kz_min < -pd_floor::<T>() * kz_max.abs().max(T::one()) {
        return Err(Error::NotPsd(format!(
            "noise covariance has eigenvalue {:e}",
            kz_min.as_f64()
        )));
    }
    Ok(())
}

/// Re-checks every invariant of an already-built model.
///
/// Constructors run the same checks, so this is only needed on models that
/// crossed a serialization boundary. Validation is idempotent.
pub fn validate_gaussian_model<T: Real>(model: &GaussianSemanticModel<T>) -> Result<()> {
    validate_gaussian_model_raw(&model.obs_cov, &model.state_transform, &model.noise_cov)
}

/// Reduces jointly Gaussian `(S, X)` second moments to the linear-plus-noise
/// form `S = H X + Z`.
///
/// Returns `H = K_SX K_X^{-1}` and the residual covariance
/// `K_Z = K_S - K_SX K_X^{-1} K_SX^T`, symmetrized. Tiny negative residual
/// eigenvalues (above `-1e-10` relative to the scale of `K_S`) are clipped to
/// zero; anything lower means the joint covariance was not positive
/// semidefinite.
pub fn jointly_gaussian_to_linear<T: Real>(
    state_cov: &DMatrix<T>,
    cross_cov: &DMatrix<T>,
    obs_cov: &DMatrix<T>,
) -> Result<(DMatrix<T>, DMatrix<T>)> {
    let m = obs_cov.nrows();
    let l = state_cov.nrows();
    if state_cov.ncols() != l || obs_cov.ncols() != m {
        return Err(Error::DimensionMismatch(
            "covariance blocks must be square".into(),
        ));
    }
    if cross_cov.shape() != (l, m) {
        return Err(Error::DimensionMismatch(format!(
            "cross covariance is {}x{}, expected {l}x{m}",
            cross_cov.nrows(),
            cross_cov.ncols()
        )));
    }
    let scale = T::one().max(linalg::max_abs(state_cov));
    if linalg::asymmetry(state_cov) > sym_tol::<T>() * scale {
        return Err(Error::NonSymmetric("state covariance".into()));
    }

    let kx = linalg::symmetrize(obs_cov);
    let (kx_min, kx_max) = linalg::eigenvalue_range(&kx);
    if kx_min <= pd_floor::<T>() * kx_max.max(T::one()) {
        return Err(Error::NotPositiveDefinite(format!(
            "observation covariance has eigenvalue {:e}",
            kx_min.as_f64()
        )));
    }

    // H^T solves K_X H^T = K_SX^T, so H = K_SX K_X^{-1} without an explicit
    // inverse.
    let ht = linalg::solve_spd(&kx, &cross_cov.transpose())
        .ok_or_else(|| Error::NotPositiveDefinite("observation covariance".into()))?;
    let h = ht.transpose();
    let explained = linalg::symmetrize(&(&h * cross_cov.transpose()));
    let residual = linalg::symmetrize(state_cov) - explained;

    let floor = -pd_floor::<T>() * T::one().max(linalg::max_abs(state_cov));
    let (res_min, _) = linalg::eigenvalue_range(&residual);
    if res_min < floor {
        return Err(Error::JointCovarianceNotPsd {
            eigenvalue: res_min.as_f64(),
        });
    }
    let kz = linalg::clip_eigenvalues(&residual, T::zero());
    Ok((h, kz))
}

/// Gaussian model with a sparse random sign matrix as the state transform.
///
/// The observation is white with per-coordinate variance `obs_variance` and
/// the state noise white with `noise_variance`. Each transform entry is
/// drawn as ±1 with equal probability, then independently reset to zero
/// with probability `zero_probability`. The matrix is a pure function of
/// `seed`, so a run can be reproduced from its parameters alone.
pub fn masked_sign_model<T: Real>(
    obs_dim: usize,
    state_dim: usize,
    obs_variance: T,
    noise_variance: T,
    zero_probability: f64,
    seed: u64,
) -> Result<GaussianSemanticModel<T>> {
    if !(0.0..=1.0).contains(&zero_probability) {
        return Err(Error::InvalidArgument(format!(
            "zero probability {zero_probability} outside [0, 1]"
        )));
    }
    if obs_dim == 0 || state_dim == 0 {
        return Err(Error::DimensionMismatch(
            "dimensions must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || {
        let sign = if rng.random_range(0.0..1.0) < 0.5 {
            T::one()
        } else {
            -T::one()
        };
        if rng.random_range(0.0..1.0) < zero_probability {
            T::zero()
        } else {
            sign
        }
    };
    // Filled row-major so the layout matches how the matrix is printed.
    let mut h = DMatrix::zeros(state_dim, obs_dim);
    for i in 0..state_dim {
        for j in 0..obs_dim {
            h[(i, j)] = draw();
        }
    }
    GaussianSemanticModel::new(
        DMatrix::identity(obs_dim, obs_dim) * obs_variance,
        h,
        DMatrix::identity(state_dim, state_dim) * noise_variance,
    )
}

/// One state channel of a multi-state Gaussian model.
#[derive(Debug, Clone, PartialEq)]
pub struct StateChannel<T: Real> {
    /// State transform for this channel.
    pub transform: DMatrix<T>,
    /// Noise covariance for this channel.
    pub noise_cov: DMatrix<T>,
}

/// Gaussian observation with `k` linear-plus-noise states
/// `S_j = H_j X + Z_j`, each carrying its own distortion budget.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiStateGaussianModel<T: Real> {
    obs_cov: DMatrix<T>,
    states: Vec<StateChannel<T>>,
}

impl<T: Real> MultiStateGaussianModel<T> {
    /// Validates and builds a multi-state model; every `(H_j, K_Zj)` pair
    /// must pass the single-state checks against the shared `K_X`.
    pub fn new(obs_cov: DMatrix<T>, states: Vec<StateChannel<T>>) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::InvalidArgument(
                "multi-state model needs at least one state".into(),
            ));
        }
        for ch in &states {
            validate_gaussian_model_raw(&obs_cov, &ch.transform, &ch.noise_cov)?;
        }
        Ok(Self {
            obs_cov: linalg::symmetrize(&obs_cov),
            states: states
                .into_iter()
                .map(|ch| StateChannel {
                    transform: ch.transform,
                    noise_cov: linalg::symmetrize(&ch.noise_cov),
                })
                .collect(),
        })
    }

    /// Observation covariance `K_X`.
    pub fn obs_cov(&self) -> &DMatrix<T> {
        &self.obs_cov
    }

    /// The state channels.
    pub fn states(&self) -> &[StateChannel<T>] {
        &self.states
    }

    /// The single-state model obtained by keeping only channel `j`.
    pub fn single(&self, j: usize) -> GaussianSemanticModel<T> {
        GaussianSemanticModel {
            obs_cov: self.obs_cov.clone(),
            state_transform: self.states[j].transform.clone(),
            noise_cov: self.states[j].noise_cov.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// budgets
// ---------------------------------------------------------------------------

/// Distortion budget pair, with an optional per-state list for multi-state
/// models.
#[derive(Debug, Clone, PartialEq)]
pub struct DistortionBudget<T: Real> {
    /// State distortion budget `D_s`.
    pub state: T,
    /// Observation distortion budget `D_o`.
    pub obs: T,
    /// Per-state budgets for the multi-state extension; when present, `state`
    /// is ignored by the multi-state solvers.
    pub per_state: Option<Vec<T>>,
}

impl<T: Real> DistortionBudget<T> {
    /// Validates a budget pair; budgets must be nonnegative (infinite is
    /// allowed and means "unconstrained").
    pub fn new(state: T, obs: T) -> Result<Self> {
        for (v, name) in [(state, "state"), (obs, "observation")] {
            if v.is_nan() || v < T::zero() {
                return Err(Error::InvalidArgument(format!(
                    "{name} budget must be nonnegative, got {}",
                    v.as_f64()
                )));
            }
        }
        Ok(Self {
            state,
            obs,
            per_state: None,
        })
    }

    /// Attaches per-state budgets, each validated nonnegative.
    pub fn with_per_state(mut self, budgets: Vec<T>) -> Result<Self> {
        for &v in &budgets {
            if v.is_nan() || v < T::zero() {
                return Err(Error::InvalidArgument(format!(
                    "per-state budget must be nonnegative, got {}",
                    v.as_f64()
                )));
            }
        }
        self.per_state = Some(budgets);
        Ok(self)
    }
}

// ---------------------------------------------------------------------------
// model files
// ---------------------------------------------------------------------------

/// A model parsed from a JSON file.
#[derive(Debug, Clone)]
pub enum ModelFile<T: Real> {
    /// Gaussian model (`K_X`, `H`, `K_Z` keys).
    Gaussian(GaussianSemanticModel<T>),
    /// Discrete source (`p_sx`, `d_s`, `d_o` keys).
    Discrete(DiscreteSemanticSource<T>),
}

#[derive(Deserialize)]
struct GaussianFileRepr {
    #[serde(rename = "K_X")]
    k_x: Vec<Vec<f64>>,
    #[serde(rename = "H")]
    h: Vec<Vec<f64>>,
    #[serde(rename = "K_Z")]
    k_z: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct DiscreteFileRepr {
    p_sx: Vec<Vec<f64>>,
    d_s: Vec<Vec<f64>>,
    d_o: Vec<Vec<f64>>,
}

fn matrix_from_rows<T: Real>(rows: &[Vec<f64>], key: &str) -> Result<DMatrix<T>> {
    if rows.is_empty() {
        return Err(Error::ModelFile(format!("key '{key}' is empty")));
    }
    let ncols = rows[0].len();
    if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::ModelFile(format!(
            "key '{key}' is not a rectangular matrix"
        )));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| {
        T::of(rows[i][j])
    }))
}

/// Parses a model from JSON text.
///
/// Gaussian files carry row-major nested arrays under `K_X`, `H`, `K_Z`;
/// discrete files carry `p_sx` (`|S| x |X|` joint pmf), `d_s` and `d_o`
/// distortion tables. The file kind is detected from the keys present.
pub fn model_from_json<T: Real>(text: &str) -> Result<ModelFile<T>> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::ModelFile(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::ModelFile("top level is not an object".into()))?;
    if obj.contains_key("K_X") {
        let repr: GaussianFileRepr =
            serde_json::from_value(value.clone()).map_err(|e| Error::ModelFile(e.to_string()))?;
        let model = GaussianSemanticModel::new(
            matrix_from_rows(&repr.k_x, "K_X")?,
            matrix_from_rows(&repr.h, "H")?,
            matrix_from_rows(&repr.k_z, "K_Z")?,
        )?;
        Ok(ModelFile::Gaussian(model))
    } else if obj.contains_key("p_sx") {
        let repr: DiscreteFileRepr =
            serde_json::from_value(value.clone()).map_err(|e| Error::ModelFile(e.to_string()))?;
        let source = DiscreteSemanticSource::new(
            matrix_from_rows(&repr.p_sx, "p_sx")?,
            matrix_from_rows(&repr.d_s, "d_s")?,
            matrix_from_rows(&repr.d_o, "d_o")?,
        )?;
        Ok(ModelFile::Discrete(source))
    } else {
        Err(Error::ModelFile(
            "expected either 'K_X' (Gaussian) or 'p_sx' (discrete) at the top level".into(),
        ))
    }
}

/// Reads and parses a model file from disk.
pub fn model_from_path<T: Real>(path: &std::path::Path) -> Result<ModelFile<T>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::ModelFile(format!("{}: {e}", path.display())))?;
    model_from_json(&text)
}
