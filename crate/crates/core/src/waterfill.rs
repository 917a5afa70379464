//! Reverse water-filling solver for simultaneously diagonalizable models.
//!
//! When `K_X` and `H^T H` commute, a joint eigenbasis turns the Gaussian
//! rate minimization into a separable program over per-coordinate error
//! variances `delta_j <= sigma_j`: minimize `1/2 sum ln(sigma_j / delta_j)`
//! subject to `sum delta_j <= D_o` and `sum alpha_j delta_j <= D_s - tr K_Z`,
//! where `sigma_j` are the eigenvalues of `K_X` and `alpha_j` the matching
//! eigenvalues of `H^T H`. The optimum is a water-filling profile
//! `delta_j = min(sigma_j, 1 / (lambda + mu alpha_j))` with one multiplier
//! per active budget, found here by bisection on the monotone budget maps.
//!
//! The `(D_s, D_o)` plane splits into four regions by which budgets bind:
//! both slack (zero rate), observation only, state only, or both. The two
//! boundary curves have closed parametric forms ([`curve_cs`], [`curve_co`])
//! and [`classify_region`] places a budget pair against them.

use nalgebra::{Complex, DMatrix};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::GaussianSemanticModel;
use crate::scalar::Real;

/// Relative tolerance of the multiplier bisections.
const BISECT_REL_TOL: f64 = 1e-12;

/// Relative eigenvalue gap below which eigenvalues of `K_X` are treated as
/// one cluster when building the joint eigenbasis.
const CLUSTER_GAP: f64 = 1e-8;

/// Default relative commutator tolerance for diagonalizability.
const COMMUTE_TOL: f64 = 1e-10;

/// Which budgets bind at the optimum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    /// Both budgets slack: zero rate.
    A0,
    /// Observation budget binds alone.
    A1,
    /// State budget binds alone.
    A2,
    /// Both budgets bind.
    A3,
}

impl std::fmt::Display for Region {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = match self {
            Region::A0 => "A0",
            Region::A1 => "A1",
            Region::A2 => "A2",
            Region::A3 => "A3",
        };
        f.write_str(tag)
    }
}

/// Joint eigenbasis of the pair `(K_X, H^T H)`.
///
/// `basis` holds the transform `Q` whose columns are the shared
/// eigenvectors: real orthogonal when built by [`simultaneous_diagonalize`],
/// complex unitary (the DFT basis) when built by [`circulant_spectral`].
/// Coordinates are sorted by `alpha` descending, ties by `sigma` descending;
/// `perm[k]` is the original index of sorted coordinate `k`.
#[derive(Debug, Clone)]
pub struct SpectralModel<T: Real> {
    sigma: Vec<T>,
    alpha: Vec<T>,
    rank: usize,
    noise_trace: T,
    basis: SpectralBasis<T>,
    perm: Vec<usize>,
}

/// Eigenbasis storage for [`SpectralModel`].
#[derive(Debug, Clone)]
pub enum SpectralBasis<T: Real> {
    /// Real orthogonal eigenvectors, one column per sorted coordinate.
    Orthogonal(DMatrix<T>),
    /// Unitary eigenvectors, one column per sorted coordinate.
    Unitary(DMatrix<Complex<T>>),
}

impl<T: Real> SpectralModel<T> {
    /// Eigenvalues of `K_X`, ordered to match [`alpha`](Self::alpha).
    pub fn sigma(&self) -> &[T] {
        &self.sigma
    }

    /// Eigenvalues of `H^T H`, sorted nonincreasing.
    pub fn alpha(&self) -> &[T] {
        &self.alpha
    }

    /// Number of coordinates with `alpha_j > 0`.
    pub fn rank(&self) -> usize {
        self.rank
    }

    /// `tr K_Z` carried over from the model.
    pub fn noise_trace(&self) -> T {
        self.noise_trace
    }

    /// The eigenbasis.
    pub fn basis(&self) -> &SpectralBasis<T> {
        &self.basis
    }

    /// Original coordinate index of sorted coordinate `k`.
    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    /// Dimension `m`.
    pub fn dim(&self) -> usize {
        self.sigma.len()
    }

    /// `tr K_X = sum sigma_j`.
    pub fn obs_trace(&self) -> T {
        self.sigma.iter().copied().sum()
    }

    /// `tr(H K_X H^T) = sum alpha_j sigma_j`.
    pub fn state_image_trace(&self) -> T {
        self.sigma
            .iter()
            .zip(&self.alpha)
            .map(|(&s, &a)| s * a)
            .sum()
    }

    /// Reassembles the full error covariance `Q diag(delta) Q^*` from a
    /// per-coordinate profile given in sorted order.
    pub fn assemble(&self, delta: &[T]) -> DMatrix<T> {
        match &self.basis {
            SpectralBasis::Orthogonal(q) => {
                let mut scaled = q.clone();
                for j in 0..delta.len() {
                    for i in 0..q.nrows() {
                        scaled[(i, j)] *= delta[j];
                    }
                }
                linalg::symmetrize(&(scaled * q.transpose()))
            }
            SpectralBasis::Unitary(q) => {
                let mut scaled = q.clone();
                for j in 0..delta.len() {
                    for i in 0..q.nrows() {
                        scaled[(i, j)] *= Complex::new(delta[j], T::zero());
                    }
                }
                let full = scaled * q.adjoint();
                // The profile respects the conjugate symmetry of the DFT
                // basis whenever it came from this model's sigma/alpha, so
                // the product is real up to roundoff.
                let real = DMatrix::from_fn(full.nrows(), full.ncols(), |i, j| full[(i, j)].re);
                linalg::symmetrize(&real)
            }
        }
    }
}

/// Sorts `(sigma, alpha)` by alpha descending (ties: sigma descending, then
/// index) and applies the same order to the basis columns.
fn sorted_spectral<T: Real>(
    sigma: Vec<T>,
    alpha: Vec<T>,
    noise_trace: T,
    basis: SpectralBasis<T>,
) -> SpectralModel<T> {
    let m = sigma.len();
    let mut perm: Vec<usize> = (0..m).collect();
    perm.sort_by(|&a, &b| {
        alpha[b]
            .partial_cmp(&alpha[a])
            .unwrap()
            .then(sigma[b].partial_cmp(&sigma[a]).unwrap())
            .then(a.cmp(&b))
    });
    let sigma_sorted: Vec<T> = perm.iter().map(|&k| sigma[k]).collect();
    let alpha_sorted: Vec<T> = perm.iter().map(|&k| alpha[k]).collect();
    let rank = alpha_sorted.iter().filter(|&&a| a > T::zero()).count();
    let basis = match basis {
        SpectralBasis::Orthogonal(q) => SpectralBasis::Orthogonal(DMatrix::from_fn(
            q.nrows(),
            m,
            |i, j| q[(i, perm[j])],
        )),
        SpectralBasis::Unitary(q) => {
            SpectralBasis::Unitary(DMatrix::from_fn(q.nrows(), m, |i, j| q[(i, perm[j])]))
        }
    };
    SpectralModel {
        sigma: sigma_sorted,
        alpha: alpha_sorted,
        rank,
        noise_trace,
        basis,
        perm,
    }
}

/// Builds the joint eigenbasis of `K_X` and `H^T H` when they commute.
///
/// The commutator `K_X G - G K_X` (with `G = H^T H`) must vanish within
/// `tol` relative to the product of the two norms; otherwise
/// [`Error::NotDiagonalizable`] is returned and the caller should fall back
/// to the interior-point solver. Repeated eigenvalues of `K_X` are handled
/// by re-diagonalizing `G` inside each eigenvalue cluster.
pub fn simultaneous_diagonalize<T: Real>(
    model: &GaussianSemanticModel<T>,
    tol: Option<T>,
) -> Result<SpectralModel<T>> {
    let kx = model.obs_cov();
    let gram = model.state_gram();
    let m = kx.nrows();
    let tol = tol.unwrap_or_else(|| T::tol(COMMUTE_TOL));

    let comm = kx * &gram - &gram * kx;
    let scale = linalg::frobenius(kx) * linalg::frobenius(&gram);
    let comm_norm = linalg::frobenius(&comm);
    if comm_norm > tol * scale.max(T::eps()) {
        return Err(Error::NotDiagonalizable {
            commutator: (comm_norm / scale.max(T::eps())).as_f64(),
            tolerance: tol.as_f64(),
        });
    }

    let eig = linalg::sym_eigen(kx);
    let sigma_scale = eig.values[m - 1].abs().max(T::one());
    let mut q = eig.vectors;
    let sigma = eig.values;

    // Re-diagonalize the Gram matrix inside each cluster of (nearly) equal
    // K_X eigenvalues; across clusters the eigenvectors already diagonalize
    // both matrices.
    let gap = T::tol(CLUSTER_GAP) * sigma_scale;
    let mut start = 0;
    while start < m {
        let mut end = start + 1;
        while end < m && (sigma[end] - sigma[end - 1]).abs() <= gap {
            end += 1;
        }
        let width = end - start;
        if width > 1 {
            let block = q.view((0, start), (m, width)).into_owned();
            let small = linalg::symmetrize(&(block.transpose() * &gram * &block));
            let inner = linalg::sym_eigen(&small);
            let rotated = block * inner.vectors;
            q.view_mut((0, start), (m, width)).copy_from(&rotated);
        }
        start = end;
    }

    let projected = linalg::symmetrize(&(q.transpose() * &gram * &q));
    let mut alpha = vec![T::zero(); m];
    let mut off = T::zero();
    for i in 0..m {
        alpha[i] = projected[(i, i)].max(T::zero());
        for j in 0..m {
            if i != j {
                off = off.max(projected[(i, j)].abs());
            }
        }
    }
    let gram_scale = linalg::max_abs(&gram).max(T::eps());
    if off > T::tol(1e-7) * gram_scale {
        return Err(Error::NotDiagonalizable {
            commutator: (off / gram_scale).as_f64(),
            tolerance: T::tol(1e-7).as_f64(),
        });
    }

    Ok(sorted_spectral(
        sigma.clone(),
        alpha,
        model.noise_trace(),
        SpectralBasis::Orthogonal(q),
    ))
}

/// Spectral form of a circulant model directly from first rows.
///
/// `kx_row` and `h_row` are the first rows of circulant `K_X` and `H`; the
/// eigenvalues are the DFTs of the rows (`sigma_j` must come out real and
/// positive) and the shared eigenbasis is the unitary DFT matrix with
/// columns `q_j(t) = exp(-2 pi i j t / m) / sqrt(m)`.
pub fn circulant_spectral<T: Real>(
    kx_row: &[T],
    h_row: &[T],
    noise_trace: T,
) -> Result<SpectralModel<T>> {
    let m = kx_row.len();
    if m == 0 || h_row.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "circulant rows have lengths {} and {}",
            m,
            h_row.len()
        )));
    }
    let kx_dft = dft(kx_row);
    let h_dft = dft(h_row);

    let mut sigma = Vec::with_capacity(m);
    let scale: T = kx_row.iter().map(|&v| v.abs()).sum();
    for (j, v) in kx_dft.iter().enumerate() {
        if v.im.abs() > T::tol(1e-9) * scale.max(T::one()) {
            return Err(Error::NonSymmetric(format!(
                "circulant K_X row gives complex eigenvalue at index {j}"
            )));
        }
        if v.re <= T::zero() {
            return Err(Error::NonPositiveSigma {
                index: j,
                value: v.re.as_f64(),
            });
        }
        sigma.push(v.re);
    }
    let alpha: Vec<T> = h_dft.iter().map(|v| v.norm_sqr()).collect();

    let root = T::one() / T::of(m as f64).sqrt();
    let q = DMatrix::from_fn(m, m, |t, j| {
        let angle = -T::of(2.0) * T::pi() * T::of((t * j) as f64) / T::of(m as f64);
        Complex::new(angle.cos() * root, angle.sin() * root)
    });

    Ok(sorted_spectral(
        sigma,
        alpha,
        noise_trace,
        SpectralBasis::Unitary(q),
    ))
}

/// Plain O(m^2) DFT; circulant model sizes make anything faster unnecessary.
fn dft<T: Real>(row: &[T]) -> Vec<Complex<T>> {
    let m = row.len();
    let two_pi = T::of(2.0) * T::pi();
    (0..m)
        .map(|j| {
            let mut acc = Complex::new(T::zero(), T::zero());
            for (t, &c) in row.iter().enumerate() {
                let angle = -two_pi * T::of(((j * t) % m) as f64) / T::of(m as f64);
                acc += Complex::new(angle.cos() * c, angle.sin() * c);
            }
            acc
        })
        .collect()
}

/// Water-filling solution: the optimal per-coordinate error variances and
/// the multipliers certifying them.
#[derive(Debug, Clone)]
pub struct WaterfillSolution<T: Real> {
    /// Rate in nats.
    pub rate: T,
    /// Optimal `delta_j`, in the sorted coordinate order of the model.
    pub allocation: Vec<T>,
    /// Which budgets bind.
    pub region: Region,
    /// Multiplier of the observation budget.
    pub obs_multiplier: T,
    /// Multiplier of the state budget.
    pub state_multiplier: T,
    /// Multipliers of the per-coordinate caps `delta_j <= sigma_j`.
    pub cap_multipliers: Vec<T>,
    /// State budget the solve was run with.
    pub state_budget: T,
    /// Observation budget the solve was run with.
    pub obs_budget: T,
}

impl<T: Real> WaterfillSolution<T> {
    /// Achieved observation distortion `sum delta_j`.
    pub fn obs_distortion(&self) -> T {
        self.allocation.iter().copied().sum()
    }

    /// Achieved state distortion `sum alpha_j delta_j + tr K_Z`.
    pub fn state_distortion(&self, spectral: &SpectralModel<T>) -> T {
        spectral
            .alpha
            .iter()
            .zip(&self.allocation)
            .map(|(&a, &d)| a * d)
            .sum::<T>()
            + spectral.noise_trace
    }
}

/// Point of the state-budget boundary curve at observation multiplier
/// `lambda > 0`: returns `(D_s, D_o)` where the observation budget alone
/// reproduces a flat water level `1/lambda`.
pub fn curve_cs<T: Real>(spectral: &SpectralModel<T>, lambda: T) -> (T, T) {
    let level = T::one() / lambda;
    let mut ds = spectral.noise_trace;
    let mut dobs = T::zero();
    for (&s, &a) in spectral.sigma.iter().zip(&spectral.alpha) {
        let d = s.min(level);
        ds += a * d;
        dobs += d;
    }
    (ds, dobs)
}

/// Point of the observation-budget boundary curve at state multiplier
/// `mu > 0`: returns `(D_s, D_o)` where the state budget alone tilts the
/// water level to `1/(mu alpha_j)` on coordinates seen by the state.
pub fn curve_co<T: Real>(spectral: &SpectralModel<T>, mu: T) -> (T, T) {
    let mut ds = spectral.noise_trace;
    let mut dobs = T::zero();
    for (&s, &a) in spectral.sigma.iter().zip(&spectral.alpha) {
        let d = if a > T::zero() {
            s.min(T::one() / (mu * a))
        } else {
            s
        };
        ds += a * d;
        dobs += d;
    }
    (ds, dobs)
}

/// Closed-form endpoints shared by both boundary curves.
///
/// Returns `(start, cs_end, co_end)`: both curves start at the zero-rate
/// corner `(tr(H K_X H^T) + tr K_Z, tr K_X)`; as its multiplier grows,
/// the state-budget curve ends at `(tr K_Z, 0)` and the observation-budget
/// curve at `(tr K_Z, sum of sigma_j over the alpha_j = 0 coordinates)`.
pub fn curve_endpoints<T: Real>(spectral: &SpectralModel<T>) -> ((T, T), (T, T), (T, T)) {
    let start = (
        spectral.state_image_trace() + spectral.noise_trace,
        spectral.obs_trace(),
    );
    let cs_end = (spectral.noise_trace, T::zero());
    let unseen: T = spectral.sigma[spectral.rank..].iter().copied().sum();
    let co_end = (spectral.noise_trace, unseen);
    (start, cs_end, co_end)
}

/// `sum_j min(sigma_j, 1/(lambda + mu alpha_j))` and
/// `sum_j alpha_j min(...)`, the two budget maps of the profile at
/// multipliers `(lambda, mu)`. Coordinates with `alpha_j = 0` fall back to
/// `sigma_j` when `lambda = 0`.
fn budget_maps<T: Real>(spectral: &SpectralModel<T>, lambda: T, mu: T) -> (T, T) {
    let mut obs = T::zero();
    let mut state = T::zero();
    for (&s, &a) in spectral.sigma.iter().zip(&spectral.alpha) {
        let denom = lambda + mu * a;
        let d = if denom > T::zero() {
            s.min(T::one() / denom)
        } else {
            s
        };
        obs += d;
        state += a * d;
    }
    (obs, state)
}

/// Bisection for the multiplier of a decreasing map `f` with `f(root) =
/// target`, given a bracket `[lo, hi]` with `f(lo) >= target >= f(hi)`.
fn bisect_multiplier<T: Real>(
    mut lo: T,
    mut hi: T,
    target: T,
    mut f: impl FnMut(T) -> T,
) -> T {
    let rel = T::tol(BISECT_REL_TOL);
    for _ in 0..300 {
        let mid = (lo + hi) * T::of(0.5);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) >= target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= rel * hi {
            break;
        }
    }
    (lo + hi) * T::of(0.5)
}

/// Initial upper bracket for a multiplier: beyond `max_j 1/sigma_j` scaled by
/// the alpha weight, every coordinate is unsaturated-free, so grow from a
/// safe bound by doubling until the map drops below target.
fn grow_bracket<T: Real>(start: T, target: T, mut f: impl FnMut(T) -> T) -> Result<T> {
    let mut hi = start;
    for _ in 0..2000 {
        if f(hi) <= target {
            return Ok(hi);
        }
        hi *= T::of(2.0);
    }
    Err(Error::RootFindingFailure(
        "multiplier bracket did not close".into(),
    ))
}

/// Classifies a budget pair by which constraints bind at the optimum.
///
/// Requires `D_s > tr K_Z` and `D_o > 0`; budgets outside the achievable
/// range produce [`Error::InfeasibleBudget`].
pub fn classify_region<T: Real>(spectral: &SpectralModel<T>, d_s: T, d_o: T) -> Result<Region> {
    let ds_eff = d_s - spectral.noise_trace;
    if ds_eff.is_nan() || ds_eff <= T::zero() {
        return Err(Error::InfeasibleBudget(format!(
            "state budget {} does not exceed the noise floor tr K_Z = {}",
            d_s.as_f64(),
            spectral.noise_trace.as_f64()
        )));
    }
    if d_o.is_nan() || d_o <= T::zero() {
        return Err(Error::InfeasibleBudget(format!(
            "observation budget {} is not positive",
            d_o.as_f64()
        )));
    }

    let obs_total = spectral.obs_trace();
    let state_total = spectral.state_image_trace();
    let obs_slack = d_o >= obs_total;
    let state_slack = ds_eff >= state_total;
    if obs_slack && state_slack {
        return Ok(Region::A0);
    }
    if obs_slack {
        return Ok(Region::A2);
    }
    if state_slack {
        return Ok(Region::A1);
    }

    // Both budgets below their saturation levels. Compare against the
    // state-budget boundary curve at the lambda matching D_o...
    let lambda = solve_obs_only(spectral, d_o)?;
    let (cs_ds, _) = curve_cs(spectral, lambda);
    if d_s >= cs_ds {
        return Ok(Region::A1);
    }
    // ...then against the observation-budget boundary curve at the mu
    // matching D_s.
    let mu = solve_state_only(spectral, ds_eff)?;
    let (_, co_do) = curve_co(spectral, mu);
    if d_o >= co_do {
        return Ok(Region::A2);
    }
    Ok(Region::A3)
}

/// Finds `lambda` with `sum min(sigma_j, 1/lambda) = d_o` (observation
/// budget active alone).
fn solve_obs_only<T: Real>(spectral: &SpectralModel<T>, d_o: T) -> Result<T> {
    let m = T::of(spectral.dim() as f64);
    let f = |lam: T| budget_maps(spectral, lam, T::zero()).0;
    // At lambda = m/d_o the map is at most d_o already.
    let hi = grow_bracket((m / d_o).max(T::tol(1e-12)), d_o, f)?;
    Ok(bisect_multiplier(T::zero(), hi, d_o, f))
}

/// Finds `mu` with `sum alpha_j min(sigma_j, 1/(mu alpha_j)) = ds_eff`
/// (state budget active alone).
fn solve_state_only<T: Real>(spectral: &SpectralModel<T>, ds_eff: T) -> Result<T> {
    let q = T::of(spectral.rank as f64);
    let f = |mu: T| budget_maps(spectral, T::zero(), mu).1;
    let hi = grow_bracket((q / ds_eff).max(T::tol(1e-12)), ds_eff, f)?;
    Ok(bisect_multiplier(T::zero(), hi, ds_eff, f))
}

/// Solves the water-filling program for a budget pair.
///
/// The returned profile satisfies the stationarity system exactly by
/// construction; active budgets are met to the bisection tolerance.
pub fn waterfill_solve<T: Real>(
    spectral: &SpectralModel<T>,
    d_s: T,
    d_o: T,
) -> Result<WaterfillSolution<T>> {
    let region = classify_region(spectral, d_s, d_o)?;
    let ds_eff = d_s - spectral.noise_trace;

    let (lambda, mu) = match region {
        Region::A0 => (T::zero(), T::zero()),
        Region::A1 => (solve_obs_only(spectral, d_o)?, T::zero()),
        Region::A2 => (T::zero(), solve_state_only(spectral, ds_eff)?),
        Region::A3 => solve_both_active(spectral, ds_eff, d_o)?,
    };

    let mut allocation = Vec::with_capacity(spectral.dim());
    let mut cap_multipliers = Vec::with_capacity(spectral.dim());
    let mut rate = T::zero();
    for (&s, &a) in spectral.sigma.iter().zip(&spectral.alpha) {
        let denom = lambda + mu * a;
        let d = if denom > T::zero() {
            s.min(T::one() / denom)
        } else {
            s
        };
        allocation.push(d);
        // Complementary slackness: the cap multiplier makes stationarity
        // -1/delta + lambda + mu alpha + nu = 0 hold exactly.
        let nu = if d == s {
            (T::one() / s - denom).max(T::zero())
        } else {
            T::zero()
        };
        cap_multipliers.push(nu);
        rate += (s / d).ln();
    }
    rate *= T::of(0.5);

    Ok(WaterfillSolution {
        rate,
        allocation,
        region,
        obs_multiplier: lambda,
        state_multiplier: mu,
        cap_multipliers,
        state_budget: d_s,
        obs_budget: d_o,
    })
}

/// Nested bisection when both budgets bind: the outer loop tilts `mu`, the
/// inner loop rebalances `lambda` to hold the observation budget, and the
/// achieved state distortion decreases monotonically in `mu`.
fn solve_both_active<T: Real>(spectral: &SpectralModel<T>, ds_eff: T, d_o: T) -> Result<(T, T)> {
    let lambda_for = |mu: T| -> Result<T> {
        // With mu fixed, sum_j min(sigma_j, 1/(lambda + mu alpha_j)) is
        // decreasing in lambda. If even lambda = 0 undershoots d_o the
        // observation budget cannot bind at this mu; report lambda = 0.
        if budget_maps(spectral, T::zero(), mu).0 <= d_o {
            return Ok(T::zero());
        }
        let m = T::of(spectral.dim() as f64);
        let f = |lam: T| budget_maps(spectral, lam, mu).0;
        let hi = grow_bracket((m / d_o).max(T::tol(1e-12)), d_o, f)?;
        Ok(bisect_multiplier(T::zero(), hi, d_o, f))
    };
    let achieved_state = |mu: T| -> Result<T> {
        let lam = lambda_for(mu)?;
        Ok(budget_maps(spectral, lam, mu).1)
    };

    // Bracket the outer multiplier.
    if achieved_state(T::zero())? <= ds_eff {
        // The state budget is already slack at mu = 0; only numerical ties
        // with the region boundary land here.
        return Ok((lambda_for(T::zero())?, T::zero()));
    }
    let mut hi = T::one();
    let mut ok = false;
    for _ in 0..200 {
        if achieved_state(hi)? <= ds_eff {
            ok = true;
            break;
        }
        hi *= T::of(2.0);
    }
    if !ok {
        return Err(Error::RootFindingFailure(
            "state multiplier bracket did not close".into(),
        ));
    }

    let rel = T::tol(BISECT_REL_TOL);
    let mut lo = T::zero();
    for _ in 0..300 {
        let mid = (lo + hi) * T::of(0.5);
        if mid <= lo || mid >= hi {
            break;
        }
        if achieved_state(mid)? >= ds_eff {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= rel * hi {
            break;
        }
    }
    let mu = (lo + hi) * T::of(0.5);
    Ok((lambda_for(mu)?, mu))
}

/// Residuals of the stationarity and complementary-slackness system for a
/// water-filling solution.
#[derive(Debug, Clone)]
pub struct KktResiduals<T: Real> {
    /// `max_j | -1/delta_j + lambda + mu alpha_j + nu_j |`.
    pub stationarity: T,
    /// `lambda * (sum delta_j - D_o)`.
    pub obs_complementarity: T,
    /// `mu * (sum alpha_j delta_j - D_s + tr K_Z)`.
    pub state_complementarity: T,
    /// `max_j nu_j * (delta_j - sigma_j)`.
    pub cap_complementarity: T,
    /// Most negative multiplier (zero when all are nonnegative).
    pub dual_feasibility: T,
    /// Largest violation of `0 < delta_j <= sigma_j` and of the two budgets.
    pub primal_feasibility: T,
}

/// Evaluates the optimality system of [`waterfill_solve`] output.
pub fn kkt_residuals<T: Real>(
    spectral: &SpectralModel<T>,
    solution: &WaterfillSolution<T>,
) -> KktResiduals<T> {
    let lambda = solution.obs_multiplier;
    let mu = solution.state_multiplier;
    let mut stationarity = T::zero();
    let mut cap_comp = T::zero();
    let mut dual = T::zero();
    let mut primal = T::zero();
    for j in 0..spectral.dim() {
        let s = spectral.sigma[j];
        let a = spectral.alpha[j];
        let d = solution.allocation[j];
        let nu = solution.cap_multipliers[j];
        stationarity = stationarity.max((-T::one() / d + lambda + mu * a + nu).abs());
        cap_comp = cap_comp.max((nu * (d - s)).abs());
        dual = dual.min(nu);
        primal = primal.max(d - s).max(-d);
    }
    dual = dual.min(lambda).min(mu);
    let obs_used = solution.obs_distortion();
    let state_used = solution.state_distortion(spectral);
    primal = primal
        .max(obs_used - solution.obs_budget)
        .max(state_used - solution.state_budget);
    KktResiduals {
        stationarity,
        obs_complementarity: lambda * (obs_used - solution.obs_budget),
        state_complementarity: mu * (state_used - solution.state_budget),
        cap_complementarity: cap_comp,
        dual_feasibility: dual,
        primal_feasibility: primal,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn spectral_from(sigma: &[f64], alpha: &[f64], noise_trace: f64) -> SpectralModel<f64> {
        let m = sigma.len();
        sorted_spectral(
            sigma.to_vec(),
            alpha.to_vec(),
            noise_trace,
            SpectralBasis::Orthogonal(DMatrix::identity(m, m)),
        )
    }

    #[test]
    fn two_coordinate_profile_matches_hand_solution() {
        // sigma = (2, 1), alpha = (1, 0), budgets D_s = 0.5 (tr K_Z = 0),
        // D_o = 1.2: both budgets bind, delta = (0.5, 0.7).
        let sp = spectral_from(&[2.0, 1.0], &[1.0, 0.0], 0.0);
        let sol = waterfill_solve(&sp, 0.5, 1.2).unwrap();
        assert_eq!(sol.region, Region::A3);
        assert!((sol.allocation[0] - 0.5).abs() < 1e-9);
        assert!((sol.allocation[1] - 0.7).abs() < 1e-9);
        let expect = 0.5 * ((2.0f64 / 0.5).ln() + (1.0f64 / 0.7).ln());
        assert!((sol.rate - expect).abs() < 1e-9);
    }

    #[test]
    fn slack_budgets_cost_nothing() {
        let sp = spectral_from(&[2.0, 1.0], &[1.0, 0.5], 0.3);
        let sol = waterfill_solve(&sp, 100.0, 100.0).unwrap();
        assert_eq!(sol.region, Region::A0);
        assert_eq!(sol.rate, 0.0);
        assert_eq!(sol.allocation, vec![2.0, 1.0]);
    }

    #[test]
    fn observation_budget_alone_gives_flat_level() {
        let sp = spectral_from(&[3.0, 2.0, 0.2], &[1.0, 0.4, 0.1], 0.0);
        let sol = waterfill_solve(&sp, 1e6, 2.5).unwrap();
        assert_eq!(sol.region, Region::A1);
        assert!((sol.obs_distortion() - 2.5).abs() < 1e-9);
        // Unsaturated coordinates share the level 1/lambda.
        let level = 1.0 / sol.obs_multiplier;
        for (j, &d) in sol.allocation.iter().enumerate() {
            let s = sp.sigma()[j];
            if d < s - 1e-9 {
                assert!((d - level).abs() < 1e-9);
            }
        }
        assert_eq!(sol.state_multiplier, 0.0);
    }

    #[test]
    fn state_budget_alone_tilts_levels() {
        let sp = spectral_from(&[1.0, 1.0], &[2.0, 0.0], 0.1);
        // ds_eff = 0.4 forces alpha-weighted filling on the first
        // coordinate; the unseen coordinate stays at sigma.
        let sol = waterfill_solve(&sp, 0.5, 1e9).unwrap();
        assert_eq!(sol.region, Region::A2);
        assert!((sol.allocation[0] - 0.2).abs() < 1e-9);
        assert_eq!(sol.allocation[1], 1.0);
        assert!((sol.state_distortion(&sp) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn kkt_holds_across_regions() {
        let sp = spectral_from(&[3.0, 1.5, 0.8, 0.3], &[2.0, 1.0, 0.3, 0.0], 0.2);
        for (ds, dobs) in [(100.0, 100.0), (100.0, 2.0), (1.0, 100.0), (1.2, 2.0)] {
            let sol = waterfill_solve(&sp, ds, dobs).unwrap();
            let res = kkt_residuals(&sp, &sol);
            assert!(res.stationarity < 1e-8, "stationarity {}", res.stationarity);
            assert!(res.obs_complementarity.abs() < 1e-8);
            assert!(res.state_complementarity.abs() < 1e-8);
            assert!(res.cap_complementarity.abs() < 1e-12);
            assert!(res.dual_feasibility >= -1e-12);
            assert!(res.primal_feasibility < 1e-8);
        }
    }

    #[test]
    fn curve_cs_closed_form_point() {
        // m = 2, sigma = (2, 1), alpha = (1, 1), lambda = 1: level 1 is
        // below sigma_1 only, so the curve point is (tr K_Z + 2, 2).
        let sp = spectral_from(&[2.0, 1.0], &[1.0, 1.0], 0.25);
        let (ds, dobs) = curve_cs(&sp, 1.0);
        assert!((ds - 2.25).abs() < 1e-15);
        assert!((dobs - 2.0).abs() < 1e-15);
    }

    #[test]
    fn curve_co_skips_unseen_coordinates() {
        // q = 1 of m = 2: the alpha = 0 coordinate contributes sigma_2 to
        // D_o at every mu.
        let sp = spectral_from(&[1.0, 1.0], &[2.0, 0.0], 0.0);
        let (ds, dobs) = curve_co(&sp, 1.0);
        assert!((ds - 1.0).abs() < 1e-15); // 2 * min(1, 1/2)
        assert!((dobs - 1.5).abs() < 1e-15); // min(1, 1/2) + 1
    }

    #[test]
    fn curve_endpoints_match_limits() {
        let sp = spectral_from(&[2.0, 1.0, 0.5], &[1.5, 0.7, 0.0], 0.4);
        let (start, cs_end, co_end) = curve_endpoints(&sp);
        let (ds0, do0) = curve_cs(&sp, 1e-9);
        assert!((start.0 - ds0).abs() < 1e-6);
        assert!((start.1 - do0).abs() < 1e-6);
        let (ds1, do1) = curve_cs(&sp, 1e12);
        assert!((cs_end.0 - ds1).abs() < 1e-6);
        assert!((cs_end.1 - do1).abs() < 1e-6);
        let (ds2, do2) = curve_co(&sp, 1e12);
        assert!((co_end.0 - ds2).abs() < 1e-6);
        assert!((co_end.1 - do2).abs() < 1e-6);
        // The unseen coordinate keeps D_o away from zero on the
        // observation-budget curve.
        assert!((co_end.1 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn regions_partition_the_plane() {
        let sp = spectral_from(&[3.0, 1.0], &[1.0, 0.2], 0.5);
        // Far corner: both slack.
        assert_eq!(classify_region(&sp, 100.0, 100.0).unwrap(), Region::A0);
        // Right strip: observation binds.
        assert_eq!(classify_region(&sp, 100.0, 1.0).unwrap(), Region::A1);
        // Top strip: state binds.
        assert_eq!(classify_region(&sp, 1.0, 100.0).unwrap(), Region::A2);
        // Near the noise floor with a tight observation budget: both bind.
        assert_eq!(classify_region(&sp, 1.0, 1.0).unwrap(), Region::A3);
        // Below the noise floor: no rate is achievable.
        assert!(classify_region(&sp, 0.4, 1.0).is_err());
        assert!(classify_region(&sp, 1.0, 0.0).is_err());
    }

    #[test]
    fn rate_is_continuous_across_region_boundaries() {
        let sp = spectral_from(&[2.0, 1.2, 0.7], &[1.3, 0.6, 0.2], 0.3);
        // Take a point of each boundary curve and perturb budgets across it.
        for lam in [0.8, 2.0] {
            let (ds, dobs) = curve_cs(&sp, lam);
            let eps = 1e-6;
            let r_in = waterfill_solve(&sp, ds - eps, dobs).unwrap().rate;
            let r_out = waterfill_solve(&sp, ds + eps, dobs).unwrap().rate;
            assert!((r_in - r_out).abs() < 1e-4);
        }
        for mu in [0.9, 3.0] {
            let (ds, dobs) = curve_co(&sp, mu);
            let eps = 1e-6;
            let r_in = waterfill_solve(&sp, ds, dobs - eps).unwrap().rate;
            let r_out = waterfill_solve(&sp, ds, dobs + eps).unwrap().rate;
            assert!((r_in - r_out).abs() < 1e-4);
        }
    }

    #[test]
    fn diagonalizes_commuting_pair_with_repeated_eigenvalues() {
        // K_X has a repeated eigenvalue; H^T H distinguishes the cluster.
        let q = DMatrix::<f64>::from_row_slice(
            3,
            3,
            &[
                0.6, 0.0, 0.8, //
                0.0, 1.0, 0.0, //
                -0.8, 0.0, 0.6,
            ],
        );
        let kx = &q * DMatrix::from_diagonal(&nalgebra::dvector![2.0, 2.0, 1.0]) * q.transpose();
        let h_diag = &q * DMatrix::from_diagonal(&nalgebra::dvector![0.5, 1.5, 1.0]) * q.transpose();
        let model = crate::model::GaussianSemanticModel::new(
            crate::linalg::symmetrize(&kx),
            h_diag,
            DMatrix::zeros(3, 3),
        )
        .unwrap();
        let sp = simultaneous_diagonalize(&model, None).unwrap();
        // alpha sorted nonincreasing and matching sigma pairing: alpha are
        // the squared diagonal entries (H^T H eigenvalues).
        assert!((sp.alpha()[0] - 2.25).abs() < 1e-9);
        assert!((sp.alpha()[1] - 1.0).abs() < 1e-9);
        assert!((sp.alpha()[2] - 0.25).abs() < 1e-9);
        assert!((sp.sigma()[0] - 2.0).abs() < 1e-9);
        assert!((sp.sigma()[1] - 1.0).abs() < 1e-9);
        assert!((sp.sigma()[2] - 2.0).abs() < 1e-9);
        // The basis reassembles K_X.
        let rebuilt = sp.assemble(sp.sigma());
        assert!(crate::linalg::max_abs(&(rebuilt - model.obs_cov())) < 1e-9);
    }

    #[test]
    fn rejects_non_commuting_pair() {
        let kx = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let h = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let model =
            crate::model::GaussianSemanticModel::new(kx, h, DMatrix::zeros(1, 1)).unwrap();
        let r = simultaneous_diagonalize(&model, None);
        assert!(matches!(r, Err(Error::NotDiagonalizable { .. })));
    }

    #[test]
    fn circulant_spectrum_matches_cosine_form() {
        let m = 8;
        let mut kx_row = vec![0.0; m];
        kx_row[0] = 1.0;
        kx_row[1] = 0.4;
        kx_row[m - 1] = 0.4;
        let mut h_row = vec![0.0; m];
        for v in h_row.iter_mut().take(2) {
            *v = 0.5;
        }
        let sp = circulant_spectral(&kx_row, &h_row, 0.0).unwrap();
        // sigma_j = 1 + 0.8 cos(2 pi j / 8), recovered through the sort
        // permutation.
        for (k, &orig) in sp.perm().iter().enumerate() {
            let expect = 1.0 + 0.8 * (2.0 * std::f64::consts::PI * orig as f64 / 8.0).cos();
            assert!((sp.sigma()[k] - expect).abs() < 1e-12);
        }
        // alpha_j = |0.5 (1 + w^j)|^2 with w the 8th root of unity.
        for (k, &orig) in sp.perm().iter().enumerate() {
            let th = 2.0 * std::f64::consts::PI * orig as f64 / 8.0;
            let expect = 0.25 * ((1.0 + th.cos()).powi(2) + th.sin().powi(2));
            assert!((sp.alpha()[k] - expect).abs() < 1e-12);
        }
        // The unitary basis reassembles the circulant K_X.
        let rebuilt = sp.assemble(sp.sigma());
        for i in 0..m {
            for j in 0..m {
                let expect = kx_row[(j + m - i) % m];
                assert!((rebuilt[(i, j)] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn circulant_rejects_indefinite_row() {
        let kx_row = [1.0, 0.6, 0.0, 0.6];
        let h_row = [1.0, 0.0, 0.0, 0.0];
        // DFT at j = 2 is 1 - 0.6 - 0.6 < 0.
        let r = circulant_spectral(&kx_row, &h_row, 0.0);
        assert!(matches!(r, Err(Error::NonPositiveSigma { .. })));
    }

    #[test]
    fn a3_interior_water_levels_follow_tilted_formula() {
        let sp = spectral_from(&[2.5, 1.8, 1.1, 0.6], &[1.9, 1.2, 0.5, 0.15], 0.35);
        let sol = waterfill_solve(&sp, 2.0, 2.0).unwrap();
        assert_eq!(sol.region, Region::A3);
        assert!(sol.obs_multiplier > 0.0 && sol.state_multiplier > 0.0);
        for j in 0..sp.dim() {
            let d = sol.allocation[j];
            if d < sp.sigma()[j] - 1e-9 {
                let expect = 1.0 / (sol.obs_multiplier + sol.state_multiplier * sp.alpha()[j]);
                assert!((d - expect).abs() < 1e-9);
            }
        }
        assert!((sol.obs_distortion() - 2.0).abs() < 1e-8);
        assert!((sol.state_distortion(&sp) - 2.0).abs() < 1e-8);
    }
}
