//! Forward channel realizing a Gaussian solution, for achievability checks.
//!
//! Given an error covariance `Delta` with `0 < Delta <= K_X`, the channel
//! `Xhat = (I - Delta K_X^-1) X + U` with independent Gaussian
//! `U ~ N(0, Delta - Delta K_X^-1 Delta)` reproduces the observation with
//! error covariance exactly `Delta`, and the linear readout `Shat = H Xhat`
//! reproduces the state. Both distortions then have closed forms
//! (`tr Delta` and `tr(H Delta H^T) + tr K_Z`), so a solver's reported
//! operating point can be validated analytically and, independently, by
//! Monte Carlo simulation of the channel.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::GaussianSemanticModel;
use crate::scalar::Real;

/// Samples per independently seeded shard of a Monte Carlo run.
///
/// Estimates are averaged shard by shard in index order, so a run is
/// deterministic for a given `(n_samples, seed)` pair no matter how shards
/// are scheduled.
const SHARD_SIZE: usize = 65_536;

/// Fewest samples for which a Monte Carlo estimate is accepted.
const MIN_SAMPLES: usize = 10_000;

/// Linear-plus-noise channel achieving a prescribed error covariance.
#[derive(Debug, Clone)]
pub struct TestChannel<T: Real> {
    /// Multiplier of the observation, `I - Delta K_X^-1`.
    pub gain: DMatrix<T>,
    /// Covariance of the additive term, `Delta - Delta K_X^-1 Delta`.
    pub noise_cov: DMatrix<T>,
    /// Readout producing the state reproduction from `Xhat`.
    pub state_map: DMatrix<T>,
    /// Model the channel was built for.
    pub model: GaussianSemanticModel<T>,
    /// Error covariance the channel realizes.
    pub delta: DMatrix<T>,
}

impl<T: Real> TestChannel<T> {
    /// Mean squared observation error, `tr Delta`, exact.
    pub fn obs_distortion(&self) -> T {
        self.delta.trace()
    }

    /// Mean squared state error, `tr(H Delta H^T) + tr K_Z`, exact.
    pub fn state_distortion(&self) -> T {
        let h = self.model.state_transform();
        (h * &self.delta * h.transpose()).trace() + self.model.noise_trace()
    }

    /// Information rate of the channel, in nats.
    pub fn rate(&self) -> Result<T> {
        rate_of_test_channel(&self.model, &self.delta)
    }
}

/// Monte Carlo distortion estimate with its statistical uncertainty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloEstimate<T: Real> {
    /// Empirical mean of the squared observation error.
    pub obs_distortion: T,
    /// Empirical mean of the squared state error.
    pub state_distortion: T,
    /// Standard error of the observation estimate.
    pub obs_std_error: T,
    /// Standard error of the state estimate.
    pub state_std_error: T,
    /// Samples drawn.
    pub n_samples: usize,
}

fn check_delta_in_range<T: Real>(
    model: &GaussianSemanticModel<T>,
    delta: &DMatrix<T>,
) -> Result<()> {
    let m = model.obs_dim();
    if delta.shape() != (m, m) {
        return Err(Error::DimensionMismatch(format!(
            "error covariance is {}x{}, expected {m}x{m}",
            delta.nrows(),
            delta.ncols()
        )));
    }
    let scale = T::one().max(linalg::max_abs(delta));
    if linalg::asymmetry(delta) > T::tol(1e-9) * scale {
        return Err(Error::DeltaOutOfRange(
            "error covariance is not symmetric".into(),
        ));
    }
    let (lo, hi) = linalg::eigenvalue_range(delta);
    if lo <= T::tol(1e-12) * hi.max(T::one()) {
        return Err(Error::DeltaOutOfRange(format!(
            "error covariance has eigenvalue {:e}; it must be positive definite",
            lo.as_f64()
        )));
    }
    let (gap, _) = linalg::eigenvalue_range(&(model.obs_cov() - delta));
    if gap < -T::tol(1e-9) * scale {
        return Err(Error::DeltaOutOfRange(format!(
            "error covariance exceeds the observation covariance: \
             eigenvalue {:e} of K_X - Delta",
            gap.as_f64()
        )));
    }
    Ok(())
}

/// Builds the channel realizing `delta` on `model`.
///
/// Requires `0 < delta <= K_X` (within tolerance). The additive noise
/// covariance is positive semidefinite whenever that holds; eigenvalues in
/// `[-tol, 0)` left by roundoff are clipped to zero, with
/// `tol = 1e-10 * max(1, |eigenvalue|_max)`.
pub fn build_test_channel<T: Real>(
    model: &GaussianSemanticModel<T>,
    delta: &DMatrix<T>,
) -> Result<TestChannel<T>> {
    check_delta_in_range(model, delta)?;
    let delta = linalg::symmetrize(delta);
    let kx_inv = linalg::spd_inverse(model.obs_cov()).ok_or_else(|| {
        Error::NotPositiveDefinite("observation covariance".into())
    })?;
    let m = model.obs_dim();
    let gain = DMatrix::identity(m, m) - &delta * &kx_inv;
    let raw = linalg::symmetrize(&(&delta - &delta * &kx_inv * &delta));
    let (lo, hi) = linalg::eigenvalue_range(&raw);
    let clip = T::tol(1e-10) * hi.abs().max(T::one());
    if lo < -clip {
        return Err(Error::NotPsd(format!(
            "channel noise covariance has eigenvalue {:e}",
            lo.as_f64()
        )));
    }
    let noise_cov = if lo < T::zero() {
        linalg::clip_eigenvalues(&raw, T::zero())
    } else {
        raw
    };
    Ok(TestChannel {
        gain,
        noise_cov,
        state_map: model.state_transform().clone(),
        model: model.clone(),
        delta,
    })
}

/// Smallest eigenvalue of `delta - delta k^-1 delta`.
///
/// For `0 < delta <= k` the value is nonnegative up to roundoff, which is
/// what makes [`build_test_channel`]'s additive noise a valid covariance;
/// this computes the margin directly so the claim can be tested in bulk.
pub fn lemma2_psd_check<T: Real>(delta: &DMatrix<T>, k: &DMatrix<T>) -> Result<T> {
    if delta.nrows() != delta.ncols() || delta.shape() != k.shape() {
        return Err(Error::DimensionMismatch(format!(
            "covariances are {}x{} and {}x{}",
            delta.nrows(),
            delta.ncols(),
            k.nrows(),
            k.ncols()
        )));
    }
    let k_inv = linalg::spd_inverse(k)
        .ok_or_else(|| Error::NotPositiveDefinite("reference covariance".into()))?;
    let residual = linalg::symmetrize(&(delta - delta * k_inv * delta));
    Ok(linalg::eigenvalue_range(&residual).0)
}

/// Information rate of the channel realizing `delta`, in nats:
/// `(logdet K_X - logdet delta) / 2`.
pub fn rate_of_test_channel<T: Real>(
    model: &GaussianSemanticModel<T>,
    delta: &DMatrix<T>,
) -> Result<T> {
    check_delta_in_range(model, delta)?;
    let logdet_kx = linalg::cholesky_logdet(model.obs_cov())
        .ok_or_else(|| Error::NotPositiveDefinite("observation covariance".into()))?;
    let logdet_delta = linalg::cholesky_logdet(&linalg::symmetrize(delta)).ok_or_else(|| {
        Error::DeltaOutOfRange("error covariance is numerically singular".into())
    })?;
    Ok(((logdet_kx - logdet_delta) * T::of(0.5)).max(T::zero()))
}

/// Factor `F` with `F F^T` equal to `cov`, valid for semidefinite matrices.
fn spectral_factor<T: Real>(cov: &DMatrix<T>) -> DMatrix<T> {
    let eig = linalg::sym_eigen(cov);
    let n = eig.values.len();
    let mut f = eig.vectors.clone();
    for j in 0..n {
        let s = eig.values[j].max(T::zero()).sqrt();
        for i in 0..n {
            f[(i, j)] *= s;
        }
    }
    f
}

fn fill_standard_normal<T: Real>(v: &mut DVector<T>, rng: &mut ChaCha8Rng) {
    for e in v.iter_mut() {
        *e = T::of(<StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng));
    }
}

/// Simulates the channel and reports empirical distortions.
///
/// Draws `X ~ N(0, K_X)`, `Z ~ N(0, K_Z)`, and the channel noise `U`, forms
/// the reproductions, and averages the squared errors. Sampling is split
/// into fixed-size shards, each with its own generator seeded from `seed`
/// and the shard index, and shard results are merged in index order by
/// sample-weighted average — the outcome is a pure function of
/// `(channel, n_samples, seed)`. The noise `Z` is simulated as Gaussian;
/// both distortions depend on it only through `K_Z`.
pub fn monte_carlo_distortions<T: Real>(
    channel: &TestChannel<T>,
    n_samples: usize,
    seed: u64,
) -> Result<MonteCarloEstimate<T>> {
    if n_samples < MIN_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_SAMPLES} samples for a meaningful estimate, got {n_samples}"
        )));
    }
    let m = channel.model.obs_dim();
    let l = channel.model.state_dim();
    let factor_x = spectral_factor(channel.model.obs_cov());
    let factor_z = spectral_factor(channel.model.noise_cov());
    let factor_u = spectral_factor(&channel.noise_cov);
    let h = &channel.state_map;

    let mut g_x = DVector::zeros(m);
    let mut g_z = DVector::zeros(l);
    let mut g_u = DVector::zeros(m);
    let mut x = DVector::zeros(m);
    let mut xhat = DVector::zeros(m);
    let mut s = DVector::zeros(l);
    let mut shat = DVector::zeros(l);

    let mut sum_o = T::zero();
    let mut sum_o2 = T::zero();
    let mut sum_s = T::zero();
    let mut sum_s2 = T::zero();

    let shards = n_samples.div_ceil(SHARD_SIZE);
    for shard in 0..shards {
        let count = SHARD_SIZE.min(n_samples - shard * SHARD_SIZE);
        let shard_seed = seed ^ (shard as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut rng = ChaCha8Rng::seed_from_u64(shard_seed);
        for _ in 0..count {
            // Draw order is part of the determinism contract: X, then Z,
            // then the channel noise.
            fill_standard_normal(&mut g_x, &mut rng);
            fill_standard_normal(&mut g_z, &mut rng);
            fill_standard_normal(&mut g_u, &mut rng);
            x.gemv(T::one(), &factor_x, &g_x, T::zero());
            xhat.gemv(T::one(), &factor_u, &g_u, T::zero());
            xhat.gemv(T::one(), &channel.gain, &x, T::one());
            s.gemv(T::one(), &factor_z, &g_z, T::zero());
            s.gemv(T::one(), h, &x, T::one());
            shat.gemv(T::one(), h, &xhat, T::zero());

            let mut d_o = T::zero();
            for i in 0..m {
                let e = x[i] - xhat[i];
                d_o += e * e;
            }
            let mut d_s = T::zero();
            for i in 0..l {
                let e = s[i] - shat[i];
                d_s += e * e;
            }
            sum_o += d_o;
            sum_o2 += d_o * d_o;
            sum_s += d_s;
            sum_s2 += d_s * d_s;
        }
    }

    let n = T::of(n_samples as f64);
    let mean_o = sum_o / n;
    let mean_s = sum_s / n;
    let std_error = |sum: T, sum2: T, mean: T| -> T {
        let var = ((sum2 - sum * mean) / (n - T::one())).max(T::zero());
        (var / n).sqrt()
    };
    Ok(MonteCarloEstimate {
        obs_distortion: mean_o,
        state_distortion: mean_s,
        obs_std_error: std_error(sum_o, sum_o2, mean_o),
        state_std_error: std_error(sum_s, sum_s2, mean_s),
        n_samples,
    })
}
