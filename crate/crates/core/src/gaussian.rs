//! Rate-distortion solvers for Gaussian models.
//!
//! The minimal coding rate for a Gaussian model under a state budget `D_s`
//! and an observation budget `D_o` is `1/2 ln(det K_X / det Delta*)`, where
//! `Delta*` maximizes `det Delta` over `0 < Delta <= K_X` (Loewner order)
//! subject to `tr(H Delta H^T) <= D_s - tr K_Z` and `tr Delta <= D_o`.
//! [`solve_gaussian_rdf`] solves that program with the shared barrier
//! engine; the variants cover matrix-valued budgets
//! ([`solve_gaussian_rdf_psd`]), a single weighted-sum budget
//! ([`solve_gaussian_rdf_weighted`]), and several state channels at once
//! ([`solve_gaussian_rdf_multi`]).
//!
//! [`exhaustive_gaussian_oracle`] recomputes small instances by projected
//! gradient ascent with alternating projections — deliberately sharing no
//! code with the barrier path — so the solver can be cross-checked.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg;
use crate::maxdet::{self, BarrierOptions, PsdFactor, TraceConstraint};
use crate::model::{GaussianSemanticModel, MultiStateGaussianModel};
use crate::scalar::Real;
use crate::waterfill::Region;

/// Tolerance knobs for the barrier solves.
#[derive(Debug, Clone)]
pub struct GaussianOptions<T: Real> {
    /// Barrier stages stop once the suboptimality bound `nu / t` drops
    /// below this; the reported rate gap is half of it (nats).
    pub gap_tol: T,
    /// Newton decrement threshold `lambda^2 / 2` for stage centering.
    pub newton_tol: T,
    /// Target for the stationarity residual of the reported multipliers.
    pub kkt_tol: T,
    /// A budget is flagged active when its slack is below `active_tol`
    /// times the budget.
    pub active_tol: T,
}

impl<T: Real> Default for GaussianOptions<T> {
    fn default() -> Self {
        GaussianOptions {
            gap_tol: T::of(1e-9),
            newton_tol: T::tol(1e-11),
            kkt_tol: T::tol(1e-8),
            active_tol: T::of(1e-6),
        }
    }
}

impl<T: Real> GaussianOptions<T> {
    fn barrier(&self) -> BarrierOptions<T> {
        BarrierOptions {
            gap_tol: self.gap_tol,
            newton_tol: self.newton_tol,
            kkt_tol: self.kkt_tol,
            ..BarrierOptions::default()
        }
    }
}

/// Verdict of [`check_feasibility`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feasibility {
    /// A strictly interior error covariance exists.
    Feasible,
    /// No positive-definite error covariance meets the budgets; the rate
    /// is infinite (`D_s` below the noise floor or `D_o <= 0`).
    InfiniteRate,
    /// The budgets are on the boundary (`D_s` equal to the noise floor
    /// with a nonzero state map): the feasible set has no interior and no
    /// positive-definite point attains it.
    EmptyInterior,
}

/// Classifies a budget pair before solving.
pub fn check_feasibility<T: Real>(
    model: &GaussianSemanticModel<T>,
    d_s: T,
    d_o: T,
) -> Feasibility {
    let noise = model.noise_trace();
    if d_s < noise || d_o <= T::zero() {
        return Feasibility::InfiniteRate;
    }
    if d_s == noise && linalg::max_abs(&model.state_gram()) > T::zero() {
        return Feasibility::EmptyInterior;
    }
    Feasibility::Feasible
}

/// Solution of a Gaussian rate-distortion program.
///
/// Multipliers follow the stationarity convention
/// `-1/2 Delta^-1 + lambda I + sum_j mu_j H_j^T H_j + Psi = 0`
/// (matrix-budget solves replace `lambda I` with `Lambda_o` and
/// `mu H^T H` with `H^T Lambda_s H`), so each trace multiplier is the
/// sensitivity of the rate in nats to its budget.
#[derive(Debug, Clone)]
pub struct GaussianRdfSolution<T: Real> {
    /// Rate in nats.
    pub rate: T,
    /// Optimal error covariance `Delta`.
    pub delta: DMatrix<T>,
    /// Multiplier `lambda` of the observation budget.
    pub obs_multiplier: T,
    /// Multipliers `mu_j` of the state budgets, one per state channel.
    pub state_multipliers: Vec<T>,
    /// Dual matrix `Psi` of the cap `Delta <= K_X`.
    pub cap_dual: DMatrix<T>,
    /// Dual matrix of the observation matrix budget (matrix-budget solves).
    pub obs_dual: Option<DMatrix<T>>,
    /// Dual matrix of the state matrix budget (matrix-budget solves).
    pub state_dual: Option<DMatrix<T>>,
    pub obs_active: bool,
    pub state_active: Vec<bool>,
    pub cap_active: bool,
    /// Upper bound on the rate suboptimality, in nats.
    pub gap: T,
    pub newton_iterations: usize,
}

impl<T: Real> GaussianRdfSolution<T> {
    /// Achieved observation distortion `tr Delta`.
    pub fn obs_distortion(&self) -> T {
        self.delta.trace()
    }

    /// Which budgets bind, in the water-filling region taxonomy.
    pub fn region(&self) -> Region {
        let state = self.state_active.iter().any(|&b| b);
        match (self.obs_active, state) {
            (false, false) => Region::A0,
            (true, false) => Region::A1,
            (false, true) => Region::A2,
            (true, true) => Region::A3,
        }
    }
}

/// How a kept trace constraint maps back onto solution fields.
enum BudgetKind<T: Real> {
    Obs,
    State(usize),
    /// Weighted-sum budget: the single multiplier splits as
    /// `lambda = theta w_o`, `mu = theta w_s`.
    Weighted { w_s: T, w_o: T },
}

struct TraceSpec<T: Real> {
    kind: BudgetKind<T>,
    matrix: DMatrix<T>,
    budget: T,
}

/// Shared assembly: drop vacuous budgets, reject impossible ones, run the
/// barrier, and route multipliers and activity flags back by kind.
fn solve_trace_budgets<T: Real>(
    kx: &DMatrix<T>,
    specs: Vec<TraceSpec<T>>,
    n_states: usize,
    opts: &GaussianOptions<T>,
) -> Result<GaussianRdfSolution<T>> {
    let mut kept: Vec<TraceSpec<T>> = Vec::new();
    for spec in specs {
        if !spec.budget.finite() {
            continue; // unbounded budget: constraint vacuous
        }
        if linalg::max_abs(&spec.matrix) == T::zero() {
            if spec.budget >= T::zero() {
                continue; // 0 <= budget always holds
            }
            return Err(Error::InfeasibleBudget(format!(
                "budget {} on an identically zero quadratic form",
                spec.budget.as_f64()
            )));
        }
        if spec.budget <= T::zero() {
            return Err(Error::InfeasibleBudget(format!(
                "budget {} admits no positive-definite error covariance",
                spec.budget.as_f64()
            )));
        }
        kept.push(spec);
    }

    let constraints: Vec<TraceConstraint<T>> = kept
        .iter()
        .map(|s| TraceConstraint {
            matrix: s.matrix.clone(),
            budget: s.budget,
        })
        .collect();
    let sol = maxdet::solve_trace_program(kx, &constraints, &opts.barrier())?;

    let ld_kx = linalg::cholesky_logdet(kx)
        .ok_or_else(|| Error::NotPositiveDefinite("observable covariance".into()))?;
    let ld_delta = linalg::cholesky_logdet(&sol.delta)
        .ok_or_else(|| Error::NewtonFailure("returned error covariance not positive definite".into()))?;
    let rate = (ld_kx - ld_delta) * T::of(0.5);

    let mut out = GaussianRdfSolution {
        rate,
        obs_multiplier: T::zero(),
        state_multipliers: vec![T::zero(); n_states],
        obs_dual: None,
        state_dual: None,
        obs_active: false,
        state_active: vec![false; n_states],
        cap_active: cap_is_active(kx, &sol.delta, opts.active_tol),
        gap: sol.gap,
        newton_iterations: sol.newton_iterations,
        cap_dual: sol.cap_dual,
        delta: sol.delta,
    };
    for (i, spec) in kept.iter().enumerate() {
        let multiplier = sol.trace_multipliers[i];
        let active = multiplier > T::zero() && sol.trace_slacks[i] < opts.active_tol * spec.budget;
        match spec.kind {
            BudgetKind::Obs => {
                out.obs_multiplier = multiplier;
                out.obs_active = active;
            }
            BudgetKind::State(j) => {
                out.state_multipliers[j] = multiplier;
                out.state_active[j] = active;
            }
            BudgetKind::Weighted { w_s, w_o } => {
                out.obs_multiplier = multiplier * w_o;
                out.state_multipliers[0] = multiplier * w_s;
                out.obs_active = active && w_o > T::zero();
                out.state_active[0] = active && w_s > T::zero();
            }
        }
    }
    Ok(out)
}

fn cap_is_active<T: Real>(kx: &DMatrix<T>, delta: &DMatrix<T>, tol: T) -> bool {
    let gap = kx - delta;
    let (lo, _) = linalg::eigenvalue_range(&gap);
    let (_, scale) = linalg::eigenvalue_range(kx);
    lo <= tol * scale
}

/// Solves the two-budget program for one model. Requires
/// [`check_feasibility`] to return `Feasible`; the other verdicts map to
/// [`Error::InfeasibleBudget`] here.
pub fn solve_gaussian_rdf<T: Real>(
    model: &GaussianSemanticModel<T>,
    d_s: T,
    d_o: T,
    opts: &GaussianOptions<T>,
) -> Result<GaussianRdfSolution<T>> {
    match check_feasibility(model, d_s, d_o) {
        Feasibility::Feasible => {}
        Feasibility::InfiniteRate => {
            return Err(Error::InfeasibleBudget(format!(
                "rate is infinite: state budget {} vs noise floor {}, observation budget {}",
                d_s.as_f64(),
                model.noise_trace().as_f64(),
                d_o.as_f64()
            )));
        }
        Feasibility::EmptyInterior => {
            return Err(Error::InfeasibleBudget(
                "state budget equals the noise floor: no positive-definite error covariance \
                 attains it"
                    .into(),
            ));
        }
    }
    let m = model.obs_dim();
    let specs = vec![
        TraceSpec {
            kind: BudgetKind::Obs,
            matrix: DMatrix::identity(m, m),
            budget: d_o,
        },
        TraceSpec {
            kind: BudgetKind::State(0),
            matrix: model.state_gram(),
            budget: d_s - model.noise_trace(),
        },
    ];
    solve_trace_budgets(model.obs_cov(), specs, 1, opts)
}

/// Solves the variant with one weighted budget
/// `w_s E[d_s] + w_o E[d_o] <= combined`, which the error covariance sees
/// as `tr((w_s H^T H + w_o I) Delta) <= combined - w_s tr K_Z`.
pub fn solve_gaussian_rdf_weighted<T: Real>(
    model: &GaussianSemanticModel<T>,
    w_s: T,
    w_o: T,
    combined: T,
    opts: &GaussianOptions<T>,
) -> Result<GaussianRdfSolution<T>> {
    if w_s < T::zero() || w_o < T::zero() || (w_s == T::zero() && w_o == T::zero()) {
        return Err(Error::InvalidArgument(
            "weights must be nonnegative and not both zero".into(),
        ));
    }
    let budget = combined - w_s * model.noise_trace();
    if combined.finite() && (budget.is_nan() || budget <= T::zero()) {
        return Err(Error::InfeasibleBudget(format!(
            "combined budget {} does not exceed the weighted noise floor {}",
            combined.as_f64(),
            (w_s * model.noise_trace()).as_f64()
        )));
    }
    let m = model.obs_dim();
    let matrix = model.state_gram() * w_s + DMatrix::identity(m, m) * w_o;
    let specs = vec![TraceSpec {
        kind: BudgetKind::Weighted { w_s, w_o },
        matrix,
        budget,
    }];
    solve_trace_budgets(model.obs_cov(), specs, 1, opts)
}

/// Solves the variant with one state budget per state channel plus the
/// shared observation budget.
pub fn solve_gaussian_rdf_multi<T: Real>(
    multi: &MultiStateGaussianModel<T>,
    state_budgets: &[T],
    d_o: T,
    opts: &GaussianOptions<T>,
) -> Result<GaussianRdfSolution<T>> {
    let states = multi.states();
    if state_budgets.len() != states.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} state budgets for {} state channels",
            state_budgets.len(),
            states.len()
        )));
    }
    if d_o <= T::zero() {
        return Err(Error::InfeasibleBudget(format!(
            "observation budget {} is not positive",
            d_o.as_f64()
        )));
    }
    let m = multi.obs_cov().nrows();
    let mut specs = vec![TraceSpec {
        kind: BudgetKind::Obs,
        matrix: DMatrix::identity(m, m),
        budget: d_o,
    }];
    for (j, (channel, &budget)) in states.iter().zip(state_budgets).enumerate() {
        let noise = channel.noise_cov.trace();
        let gram = linalg::symmetrize(&(channel.transform.transpose() * &channel.transform));
        if budget < noise {
            return Err(Error::InfeasibleBudget(format!(
                "state budget {} for channel {} is below its noise floor {}",
                budget.as_f64(),
                j,
                noise.as_f64()
            )));
        }
        if budget == noise && linalg::max_abs(&gram) > T::zero() {
            return Err(Error::InfeasibleBudget(format!(
                "state budget for channel {j} equals its noise floor: empty interior"
            )));
        }
        specs.push(TraceSpec {
            kind: BudgetKind::State(j),
            matrix: gram,
            budget: budget - noise,
        });
    }
    solve_trace_budgets(multi.obs_cov(), specs, states.len(), opts)
}

/// Solves the variant with matrix-valued budgets: `Delta <= D_o` and
/// `H Delta H^T + K_Z <= D_s` in the Loewner order.
pub fn solve_gaussian_rdf_psd<T: Real>(
    model: &GaussianSemanticModel<T>,
    d_s_matrix: &DMatrix<T>,
    d_o_matrix: &DMatrix<T>,
    opts: &GaussianOptions<T>,
) -> Result<GaussianRdfSolution<T>> {
    let m = model.obs_dim();
    let p = model.state_dim();
    if d_o_matrix.nrows() != m || d_o_matrix.ncols() != m {
        return Err(Error::DimensionMismatch(format!(
            "observation budget matrix is {}x{}, expected {m}x{m}",
            d_o_matrix.nrows(),
            d_o_matrix.ncols()
        )));
    }
    if d_s_matrix.nrows() != p || d_s_matrix.ncols() != p {
        return Err(Error::DimensionMismatch(format!(
            "state budget matrix is {}x{}, expected {p}x{p}",
            d_s_matrix.nrows(),
            d_s_matrix.ncols()
        )));
    }
    for (name, mat) in [("observation", d_o_matrix), ("state", d_s_matrix)] {
        let scale = linalg::max_abs(mat).max(T::one());
        if linalg::asymmetry(mat) > T::tol(1e-12) * scale {
            return Err(Error::NonSymmetric(format!("{name} budget matrix")));
        }
    }
    let obs_bound = linalg::symmetrize(d_o_matrix);
    let state_bound = linalg::symmetrize(&(d_s_matrix - model.noise_cov()));
    // Both bounds must be positive definite for any strictly interior
    // Delta to exist.
    if linalg::cholesky_logdet(&obs_bound).is_none() {
        return Err(Error::InfeasibleBudget(
            "observation budget matrix is not positive definite".into(),
        ));
    }
    if linalg::cholesky_logdet(&state_bound).is_none() {
        return Err(Error::InfeasibleBudget(
            "state budget matrix minus the noise covariance is not positive definite".into(),
        ));
    }

    let kx = model.obs_cov();
    let factors = [
        PsdFactor {
            bound: kx.clone(),
            map: DMatrix::identity(m, m),
        },
        PsdFactor {
            bound: obs_bound.clone(),
            map: DMatrix::identity(m, m),
        },
        PsdFactor {
            bound: state_bound.clone(),
            map: model.state_transform().clone(),
        },
    ];
    let sol = maxdet::solve_psd_program(kx, &factors, &opts.barrier())?;

    let ld_kx = linalg::cholesky_logdet(kx)
        .ok_or_else(|| Error::NotPositiveDefinite("observable covariance".into()))?;
    let ld_delta = linalg::cholesky_logdet(&sol.delta)
        .ok_or_else(|| Error::NewtonFailure("returned error covariance not positive definite".into()))?;

    let matrix_active = |bound: &DMatrix<T>, value: &DMatrix<T>| {
        let slack = bound - value;
        let (lo, _) = linalg::eigenvalue_range(&slack);
        let (_, scale) = linalg::eigenvalue_range(bound);
        lo <= opts.active_tol * scale
    };
    let h = model.state_transform();
    let state_image = linalg::symmetrize(&(h * &sol.delta * h.transpose()));
    Ok(GaussianRdfSolution {
        rate: (ld_kx - ld_delta) * T::of(0.5),
        obs_multiplier: T::zero(),
        state_multipliers: vec![T::zero()],
        obs_active: matrix_active(&obs_bound, &sol.delta),
        state_active: vec![matrix_active(&state_bound, &state_image)],
        cap_active: cap_is_active(kx, &sol.delta, opts.active_tol),
        gap: sol.gap,
        newton_iterations: sol.newton_iterations,
        cap_dual: sol.factor_duals[0].clone(),
        obs_dual: Some(sol.factor_duals[1].clone()),
        state_dual: Some(sol.factor_duals[2].clone()),
        delta: sol.delta,
    })
}

/// Mean state distortion of any reproduction with the given second
/// moments: for `S = HX + Z` and a reproduction with cross-covariance
/// `K_XS^ = E[X S^^T]` and covariance `K_S^`,
/// `E|S - S^|^2 = tr(H K_X H^T) + tr K_Z - 2 tr(H K_XS^) + tr K_S^`.
pub fn linear_reproduction_state_distortion<T: Real>(
    model: &GaussianSemanticModel<T>,
    cross_cov: &DMatrix<T>,
    repr_cov: &DMatrix<T>,
) -> Result<T> {
    let m = model.obs_dim();
    let p = model.state_dim();
    if cross_cov.nrows() != m || cross_cov.ncols() != p {
        return Err(Error::DimensionMismatch(format!(
            "cross-covariance is {}x{}, expected {m}x{p}",
            cross_cov.nrows(),
            cross_cov.ncols()
        )));
    }
    if repr_cov.nrows() != p || repr_cov.ncols() != p {
        return Err(Error::DimensionMismatch(format!(
            "reproduction covariance is {}x{}, expected {p}x{p}",
            repr_cov.nrows(),
            repr_cov.ncols()
        )));
    }
    let coupled = (model.state_transform() * cross_cov).trace();
    Ok(model.state_image_trace() + model.noise_trace() - T::of(2.0) * coupled + repr_cov.trace())
}

// ---------------------------------------------------------------------------
// Independent oracle
// ---------------------------------------------------------------------------

/// Recomputes the two-budget rate by projected gradient ascent on
/// `logdet Delta` from 200 random interior starts, using alternating
/// projections (Dykstra) onto the constraint sets. Every candidate is scaled
/// back to exact feasibility before it is scored, so a slowly converging
/// projection can never report an infeasibly large determinant. Shares no
/// code with the barrier path. Guarded to `m <= 4`.
pub fn exhaustive_gaussian_oracle<T: Real>(
    model: &GaussianSemanticModel<T>,
    d_s: T,
    d_o: T,
) -> Result<T> {
    let m = model.obs_dim();
    if m > 4 {
        return Err(Error::TooLarge(format!(
            "oracle enumerates starts densely; dimension {m} > 4"
        )));
    }
    if check_feasibility(model, d_s, d_o) != Feasibility::Feasible {
        return Err(Error::InfeasibleBudget(
            "oracle requires a feasible budget pair".into(),
        ));
    }

    let kx = model.obs_cov();
    let gram = model.state_gram();
    let (_, sigma_max) = linalg::eigenvalue_range(kx);
    let floor = T::of(1e-12) * sigma_max;
    let b_s = d_s - model.noise_trace();

    // Halfspaces <M, Delta> <= b with M nonzero; vacuous budgets dropped.
    let mut halfspaces: Vec<(DMatrix<T>, T)> = Vec::new();
    if d_o.finite() {
        halfspaces.push((DMatrix::identity(m, m), d_o));
    }
    if b_s.finite() && linalg::max_abs(&gram) > T::zero() {
        halfspaces.push((gram.clone(), b_s));
    }

    let project = |start: &DMatrix<T>| -> DMatrix<T> {
        // Dykstra's alternating projections onto: {Delta >= floor I},
        // {Delta <= K_X}, and the halfspaces.
        let n_sets = 2 + halfspaces.len();
        let mut x = linalg::symmetrize(start);
        let mut corrections = vec![DMatrix::<T>::zeros(m, m); n_sets];
        for _ in 0..120 {
            let mut shift = T::zero();
            for (set, correction) in corrections.iter_mut().enumerate() {
                let y = &x + &*correction;
                let projected = match set {
                    0 => linalg::clip_eigenvalues(&y, floor),
                    1 => kx - linalg::clip_eigenvalues(&(kx - &y), T::zero()),
                    k => {
                        let (mat, budget) = &halfspaces[k - 2];
                        let excess = linalg::dot(mat, &y) - *budget;
                        if excess > T::zero() {
                            let norm2 = linalg::dot(mat, mat);
                            &y - &(mat * (excess / norm2))
                        } else {
                            y.clone()
                        }
                    }
                };
                *correction = &y - &projected;
                shift = shift.max(linalg::max_abs(&(&projected - &x)));
                x = projected;
            }
            if shift <= T::tol(1e-13) * sigma_max {
                break;
            }
        }
        x
    };

    // Dykstra stalls near corners where several sets meet at a shallow
    // angle, so a projected point can still sit measurably outside the
    // feasible region. Shrinking it toward the origin restores exact
    // feasibility: every constraint set here is star-shaped around zero.
    let kx_root = nalgebra::Cholesky::new(kx.clone())
        .ok_or_else(|| Error::NotPositiveDefinite("observable covariance".into()))?
        .l();
    let certify = |y: &DMatrix<T>| -> Option<(DMatrix<T>, T)> {
        let clipped = linalg::clip_eigenvalues(y, floor);
        let half = kx_root.solve_lower_triangular(&clipped)?;
        let whitened = kx_root.solve_lower_triangular(&half.transpose())?;
        let (_, beta) = linalg::eigenvalue_range(&linalg::symmetrize(&whitened));
        let mut scale = if beta > T::one() { T::one() / beta } else { T::one() };
        for (mat, budget) in &halfspaces {
            let load = linalg::dot(mat, &clipped);
            if load > *budget {
                scale = scale.min(*budget / load);
            }
        }
        let feasible = clipped * scale;
        let value = linalg::cholesky_logdet(&feasible)?;
        Some((feasible, value))
    };

    let ascend = |start: DMatrix<T>| -> Option<T> {
        let (mut x, mut f) = certify(&project(&start))?;
        let mut eta = T::of(0.05) * sigma_max;
        let mut stall = 0;
        for _ in 0..400 {
            let grad = linalg::spd_inverse(&x)?;
            let mut improved = false;
            for _ in 0..30 {
                if let Some((cand, fc)) = certify(&project(&(&x + &grad * eta))) {
                    if fc > f {
                        x = cand;
                        f = fc;
                        eta *= T::of(1.3);
                        improved = true;
                        break;
                    }
                }
                eta *= T::of(0.4);
            }
            if !improved {
                break;
            }
            if eta < T::tol(1e-14) * sigma_max {
                stall += 1;
                if stall > 3 {
                    break;
                }
            }
        }
        Some(f)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(0x6f72_6163_6c65);
    let mut best = -<T as Real>::infinity();
    // One deterministic interior start plus 200 random ones.
    let mut starts: Vec<DMatrix<T>> = vec![kx * T::of(0.25)];
    for _ in 0..200 {
        starts.push(linalg::random_spd(m, floor.as_f64(), sigma_max.as_f64(), &mut rng));
    }
    for start in starts {
        if let Some(f) = ascend(start) {
            best = best.max(f);
        }
    }
    if !best.finite() {
        return Err(Error::RootFindingFailure(
            "no oracle start produced a feasible point".into(),
        ));
    }
    let ld_kx = linalg::cholesky_logdet(kx)
        .ok_or_else(|| Error::NotPositiveDefinite("observable covariance".into()))?;
    Ok(((ld_kx - best) * T::of(0.5)).max(T::zero()))
}

// ---------------------------------------------------------------------------
// Gaussian comparison bound
// ---------------------------------------------------------------------------

/// Real-line placement of a finite source's symbols, for comparing its rate
/// against the Gaussian model with the same second moments.
#[derive(Debug, Clone, Copy)]
pub struct ScalarEmbedding<'a, T: Real> {
    /// Value of each state symbol.
    pub state_values: &'a [T],
    /// Value of each observation symbol.
    pub obs_values: &'a [T],
    /// Value of each state-reproduction symbol.
    pub state_repr_values: &'a [T],
    /// Value of each observation-reproduction symbol.
    pub obs_repr_values: &'a [T],
}

/// Solves a scalar finite-alphabet source and the Gaussian model sharing
/// its second moments at the same budgets, returning
/// `(discrete rate, Gaussian rate)`.
///
/// Among sources with fixed second moments and squared-error distortions,
/// the Gaussian needs the highest rate, so the first component never
/// exceeds the second by more than solver tolerance. Both distortion
/// tables must be squared differences of the embedded values (checked to
/// 1e-9); the Gaussian model is fitted from the central moments as
/// `K_X = Var X`, `H = Cov(S,X)/Var X`, `K_Z = Var S - Cov(S,X)^2/Var X`.
pub fn gaussian_upper_bound_check<T: Real>(
    source: &crate::model::DiscreteSemanticSource<T>,
    embedding: ScalarEmbedding<'_, T>,
    d_s: T,
    d_o: T,
    discrete_opts: &crate::discrete::DiscreteOptions<T>,
    gaussian_opts: &GaussianOptions<T>,
) -> Result<(T, T)> {
    let lengths = [
        (embedding.state_values.len(), source.n_states(), "state"),
        (embedding.obs_values.len(), source.n_obs(), "observation"),
        (
            embedding.state_repr_values.len(),
            source.n_state_repr(),
            "state reproduction",
        ),
        (
            embedding.obs_repr_values.len(),
            source.n_obs_repr(),
            "observation reproduction",
        ),
    ];
    for (got, want, what) in lengths {
        if got != want {
            return Err(Error::DimensionMismatch(format!(
                "{what} values: got {got}, expected {want}"
            )));
        }
    }
    for (table, rows, cols, what) in [
        (
            source.state_distortion(),
            embedding.state_values,
            embedding.state_repr_values,
            "state",
        ),
        (
            source.obs_distortion(),
            embedding.obs_values,
            embedding.obs_repr_values,
            "observation",
        ),
    ] {
        for (i, &a) in rows.iter().enumerate() {
            for (j, &b) in cols.iter().enumerate() {
                let want = (a - b) * (a - b);
                if (table[(i, j)] - want).abs() > T::tol(1e-9) * T::one().max(want) {
                    return Err(Error::InvalidArgument(format!(
                        "{what} distortion is not the squared difference of the \
                         embedded values at ({i}, {j})"
                    )));
                }
            }
        }
    }

    let joint = source.joint_pmf();
    let mut mean_s = T::zero();
    let mut mean_x = T::zero();
    for s in 0..source.n_states() {
        for x in 0..source.n_obs() {
            mean_s += joint[(s, x)] * embedding.state_values[s];
            mean_x += joint[(s, x)] * embedding.obs_values[x];
        }
    }
    let mut var_s = T::zero();
    let mut var_x = T::zero();
    let mut cov_sx = T::zero();
    for s in 0..source.n_states() {
        for x in 0..source.n_obs() {
            let ds = embedding.state_values[s] - mean_s;
            let dx = embedding.obs_values[x] - mean_x;
            var_s += joint[(s, x)] * ds * ds;
            var_x += joint[(s, x)] * dx * dx;
            cov_sx += joint[(s, x)] * ds * dx;
        }
    }
    if var_x <= T::zero() {
        return Err(Error::InvalidArgument(
            "observation values are constant under the source law".into(),
        ));
    }
    let h = cov_sx / var_x;
    let k_z = (var_s - cov_sx * cov_sx / var_x).max(T::zero());
    let model = GaussianSemanticModel::new(
        DMatrix::from_element(1, 1, var_x),
        DMatrix::from_element(1, 1, h),
        DMatrix::from_element(1, 1, k_z),
    )?;

    let discrete = crate::discrete::solve_discrete_rdf(source, d_s, d_o, discrete_opts)?;
    let gaussian = solve_gaussian_rdf(&model, d_s, d_o, gaussian_opts)?;
    Ok((discrete.rate, gaussian.rate))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DiscreteSemanticSource, StateChannel};
    use crate::waterfill;
    use nalgebra::dvector;

    fn opts() -> GaussianOptions<f64> {
        GaussianOptions::default()
    }

    fn scalar_model(sigma2: f64, h: f64, sz2: f64) -> GaussianSemanticModel<f64> {
        GaussianSemanticModel::new(
            DMatrix::from_element(1, 1, sigma2),
            DMatrix::from_element(1, 1, h),
            DMatrix::from_element(1, 1, sz2),
        )
        .unwrap()
    }

    fn toy_model() -> GaussianSemanticModel<f64> {
        GaussianSemanticModel::new(
            DMatrix::from_row_slice(3, 3, &[11.0, 0.0, 0.5, 0.0, 3.0, -2.0, 0.5, -2.0, 2.35]),
            DMatrix::from_row_slice(2, 3, &[0.0701, 0.305, 0.457, -0.0305, -0.220, 0.671]),
            DMatrix::from_row_slice(2, 2, &[0.701, -0.305, -0.305, 0.220]),
        )
        .unwrap()
    }

    fn scalar_reference(sigma2: f64, h: f64, sz2: f64, d_s: f64, d_o: f64) -> f64 {
        let delta = sigma2.min(d_o).min((d_s - sz2) / (h * h));
        (0.5 * (sigma2 / delta).ln()).max(0.0)
    }

    #[test]
    fn scalar_program_matches_closed_form() {
        let cases = [
            (4.0, 1.0, 0.5, 2.0, 1.0),   // observation budget binds
            (4.0, 2.0, 0.3, 1.1, 3.0),   // state budget binds
            (4.0, 1.0, 0.0, 0.8, 0.9),   // both tight-ish
            (2.0, 0.7, 0.1, 50.0, 50.0), // slack: zero rate
        ];
        for (sigma2, h, sz2, d_s, d_o) in cases {
            let model = scalar_model(sigma2, h, sz2);
            let sol = solve_gaussian_rdf(&model, d_s, d_o, &opts()).unwrap();
            let expect = scalar_reference(sigma2, h, sz2, d_s, d_o);
            assert!(
                (sol.rate - expect).abs() < 1e-8,
                "({sigma2},{h},{sz2},{d_s},{d_o}): {} vs {expect}",
                sol.rate
            );
        }
    }

    #[test]
    fn slack_budgets_give_zero_rate_and_full_delta() {
        let model = toy_model();
        let sol = solve_gaussian_rdf(&model, 1e6, 1e6, &opts()).unwrap();
        assert_eq!(sol.rate, 0.0);
        assert_eq!(sol.delta, *model.obs_cov());
        assert!(!sol.obs_active);
        assert!(!sol.state_active[0]);
        assert_eq!(sol.region(), waterfill::Region::A0);
    }

    #[test]
    fn feasibility_verdicts() {
        let model = toy_model();
        // Noise floor of the toy model is 0.921.
        assert_eq!(check_feasibility(&model, 0.5, 1.0), Feasibility::InfiniteRate);
        assert_eq!(check_feasibility(&model, 1.0, 0.0), Feasibility::InfiniteRate);
        assert_eq!(
            check_feasibility(&model, model.noise_trace(), 1.0),
            Feasibility::EmptyInterior
        );
        assert_eq!(check_feasibility(&model, 1.5, 4.0), Feasibility::Feasible);
        assert!(solve_gaussian_rdf(&model, 0.5, 1.0, &opts()).is_err());
    }

    #[test]
    fn kkt_system_holds_at_an_interior_solution() {
        let model = toy_model();
        let sol = solve_gaussian_rdf(&model, 1.5, 4.0, &opts()).unwrap();
        let delta_inv = linalg::spd_inverse(&sol.delta).unwrap();
        let resid = -&delta_inv * 0.5
            + DMatrix::<f64>::identity(3, 3) * sol.obs_multiplier
            + model.state_gram() * sol.state_multipliers[0]
            + &sol.cap_dual;
        assert!(linalg::frobenius(&resid) < 1e-6, "{resid}");
        // Complementarity within 1e-7.
        let obs_slack = 4.0 - sol.delta.trace();
        let state_slack =
            1.5 - model.noise_trace() - linalg::dot(&model.state_gram(), &sol.delta);
        assert!((sol.obs_multiplier * obs_slack).abs() < 1e-7);
        assert!((sol.state_multipliers[0] * state_slack).abs() < 1e-7);
        let cap_comp = linalg::dot(&sol.cap_dual, &(model.obs_cov() - &sol.delta));
        assert!(cap_comp.abs() < 1e-7);
        // Primal feasibility within the stated slack.
        assert!(sol.delta.trace() <= 4.0 + 1e-7);
        assert!(state_slack > -1e-7);
        assert!(sol.rate >= -1e-9);
    }

    #[test]
    fn commuting_model_matches_water_filling() {
        let model = GaussianSemanticModel::new(
            DMatrix::from_diagonal(&dvector![2.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        let sol = solve_gaussian_rdf(&model, 0.5, 1.2, &opts()).unwrap();
        let spectral = waterfill::simultaneous_diagonalize(&model, None).unwrap();
        let wf = waterfill::waterfill_solve(&spectral, 0.5, 1.2).unwrap();
        assert!((sol.rate - wf.rate).abs() < 1e-7, "{} vs {}", sol.rate, wf.rate);
        assert!((sol.delta[(0, 0)] - 0.5).abs() < 1e-6);
        assert!((sol.delta[(1, 1)] - 0.7).abs() < 1e-6);
        assert_eq!(sol.region(), waterfill::Region::A3);
        // Multipliers agree with the water-filling multipliers.
        assert!((sol.obs_multiplier - wf.obs_multiplier * 0.5).abs() < 1e-5);
        assert!((sol.state_multipliers[0] - wf.state_multiplier * 0.5).abs() < 1e-5);
    }

    #[test]
    fn rate_is_invariant_under_orthogonal_change_of_basis() {
        let model = toy_model();
        let theta: f64 = 0.55;
        let (c, s) = (theta.cos(), theta.sin());
        let q = DMatrix::from_row_slice(3, 3, &[c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0]);
        let rotated = GaussianSemanticModel::new(
            linalg::symmetrize(&(&q * model.obs_cov() * q.transpose())),
            model.state_transform() * q.transpose(),
            model.noise_cov().clone(),
        )
        .unwrap();
        let (d_s, d_o) = (1.5, 4.0);
        let base = solve_gaussian_rdf(&model, d_s, d_o, &opts()).unwrap();
        let rot = solve_gaussian_rdf(&rotated, d_s, d_o, &opts()).unwrap();
        assert!((base.rate - rot.rate).abs() < 1e-8);
        let conjugated = &q * &base.delta * q.transpose();
        assert!(linalg::max_abs(&(&rot.delta - conjugated)) < 1e-6);
    }

    #[test]
    fn weighted_with_zero_state_weight_matches_observation_only() {
        let model = toy_model();
        let combined = 3.0;
        let weighted = solve_gaussian_rdf_weighted(&model, 0.0, 1.0, combined, &opts()).unwrap();
        let plain = solve_gaussian_rdf(&model, f64::INFINITY, combined, &opts()).unwrap();
        assert!((weighted.rate - plain.rate).abs() < 1e-10);
        assert!(weighted.state_multipliers[0] == 0.0);
        assert!((weighted.obs_multiplier - plain.obs_multiplier).abs() < 1e-8);
    }

    #[test]
    fn weighted_rejects_budget_below_weighted_noise_floor() {
        let model = toy_model(); // noise floor 0.921
        let r = solve_gaussian_rdf_weighted(&model, 1.0, 1.0, 0.9, &opts());
        assert!(matches!(r, Err(Error::InfeasibleBudget(_))));
        let r = solve_gaussian_rdf_weighted(&model, 0.0, 0.0, 1.0, &opts());
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn multi_with_one_channel_matches_plain_solver() {
        let model = toy_model();
        let multi = MultiStateGaussianModel::new(
            model.obs_cov().clone(),
            vec![StateChannel {
                transform: model.state_transform().clone(),
                noise_cov: model.noise_cov().clone(),
            }],
        )
        .unwrap();
        let a = solve_gaussian_rdf(&model, 1.5, 4.0, &opts()).unwrap();
        let b = solve_gaussian_rdf_multi(&multi, &[1.5], 4.0, &opts()).unwrap();
        assert!((a.rate - b.rate).abs() < 1e-9);
        assert!(linalg::max_abs(&(&a.delta - &b.delta)) < 1e-7);
    }

    #[test]
    fn duplicated_state_channel_changes_nothing() {
        let model = toy_model();
        let channel = StateChannel {
            transform: model.state_transform().clone(),
            noise_cov: model.noise_cov().clone(),
        };
        let multi =
            MultiStateGaussianModel::new(model.obs_cov().clone(), vec![channel.clone(), channel])
                .unwrap();
        let single = solve_gaussian_rdf(&model, 1.5, 4.0, &opts()).unwrap();
        let doubled = solve_gaussian_rdf_multi(&multi, &[1.5, 1.5], 4.0, &opts()).unwrap();
        assert!((single.rate - doubled.rate).abs() < 1e-6);
    }

    #[test]
    fn psd_budgets_on_a_diagonal_model_decouple() {
        let model = GaussianSemanticModel::new(
            DMatrix::from_diagonal(&dvector![2.0, 1.0]),
            DMatrix::identity(2, 2),
            DMatrix::from_diagonal(&dvector![0.1, 0.2]),
        )
        .unwrap();
        let d_s = DMatrix::from_diagonal(&dvector![0.5, 0.9]);
        let d_o = DMatrix::from_diagonal(&dvector![0.8, 5.0]);
        let sol = solve_gaussian_rdf_psd(&model, &d_s, &d_o, &opts()).unwrap();
        // Per-coordinate caps: min(sigma, d_o, d_s - kz).
        assert!((sol.delta[(0, 0)] - 0.4).abs() < 1e-6, "{}", sol.delta[(0, 0)]);
        assert!((sol.delta[(1, 1)] - 0.7).abs() < 1e-6, "{}", sol.delta[(1, 1)]);
        let expect = 0.5 * ((2.0f64 / 0.4).ln() + (1.0f64 / 0.7).ln());
        assert!((sol.rate - expect).abs() < 1e-6);
    }

    #[test]
    fn psd_budgets_looser_than_cap_give_zero_rate() {
        let model = toy_model();
        let d_o = model.obs_cov() * 2.0;
        let d_s = linalg::symmetrize(
            &(model.state_transform() * model.obs_cov() * model.state_transform().transpose()
                * 2.0
                + model.noise_cov() * 2.0),
        );
        let sol = solve_gaussian_rdf_psd(&model, &d_s, &d_o, &opts()).unwrap();
        assert_eq!(sol.rate, 0.0);
    }

    #[test]
    fn psd_identity_budgets_are_stricter_than_trace_budgets() {
        // Budgets large enough that D_s/p I - K_Z stays positive definite
        // (the top K_Z eigenvalue is about 0.849).
        let model = toy_model();
        let (d_s, d_o) = (2.4, 4.0);
        let trace_sol = solve_gaussian_rdf(&model, d_s, d_o, &opts()).unwrap();
        let m = model.obs_dim() as f64;
        let p = model.state_dim() as f64;
        let psd_sol = solve_gaussian_rdf_psd(
            &model,
            &(DMatrix::identity(2, 2) * (d_s / p)),
            &(DMatrix::identity(3, 3) * (d_o / m)),
            &opts(),
        )
        .unwrap();
        assert!(psd_sol.rate >= trace_sol.rate - 1e-8);
    }

    #[test]
    fn oracle_agrees_with_closed_form_and_barrier() {
        let model = scalar_model(4.0, 1.0, 0.5);
        let rate = exhaustive_gaussian_oracle(&model, 2.0, 1.0).unwrap();
        assert!((rate - scalar_reference(4.0, 1.0, 0.5, 2.0, 1.0)).abs() < 1e-6);

        let diag = GaussianSemanticModel::new(
            DMatrix::from_diagonal(&dvector![2.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        let oracle: f64 = exhaustive_gaussian_oracle(&diag, 0.5, 1.2).unwrap();
        let spectral = waterfill::simultaneous_diagonalize(&diag, None).unwrap();
        let wf = waterfill::waterfill_solve(&spectral, 0.5, 1.2).unwrap();
        assert!((oracle - wf.rate).abs() < 1e-5, "{oracle} vs {}", wf.rate);
    }

    #[test]
    fn oracle_rejects_large_models() {
        let model = GaussianSemanticModel::new(
            DMatrix::identity(5, 5),
            DMatrix::identity(5, 5),
            DMatrix::zeros(5, 5),
        )
        .unwrap();
        assert!(matches!(
            exhaustive_gaussian_oracle(&model, 1.0, 1.0),
            Err(Error::TooLarge(_))
        ));
    }

    #[test]
    fn reproduction_distortion_identities() {
        let model = toy_model();
        let m = model.obs_dim();
        let p = model.state_dim();
        // Zero reproduction.
        let zero = linear_reproduction_state_distortion(
            &model,
            &DMatrix::zeros(m, p),
            &DMatrix::zeros(p, p),
        )
        .unwrap();
        assert!((zero - model.state_image_trace() - model.noise_trace()).abs() < 1e-12);
        // Reproduction S^ = HX recovers everything except the noise.
        let h = model.state_transform();
        let cross = model.obs_cov() * h.transpose();
        let repr = linalg::symmetrize(&(h * model.obs_cov() * h.transpose()));
        let thru = linear_reproduction_state_distortion(&model, &cross, &repr).unwrap();
        assert!((thru - model.noise_trace()).abs() < 1e-12);
    }

    /// Source equal to its own state, on the given values with the given
    /// probabilities, under squared-error distortions.
    fn self_state_source(values: &[f64], pmf: &[f64]) -> DiscreteSemanticSource<f64> {
        let n = values.len();
        let joint = DMatrix::from_fn(n, n, |s, x| if s == x { pmf[x] } else { 0.0 });
        let table = DMatrix::from_fn(n, n, |i, j| (values[i] - values[j]).powi(2));
        DiscreteSemanticSource::new(joint, table.clone(), table).unwrap()
    }

    #[test]
    fn two_point_source_needs_less_rate_than_its_gaussian_fit() {
        let values = [-1.0, 1.0];
        let source = self_state_source(&values, &[0.5, 0.5]);
        let embedding = ScalarEmbedding {
            state_values: &values,
            obs_values: &values,
            state_repr_values: &values,
            obs_repr_values: &values,
        };
        let (r_disc, r_gauss) = gaussian_upper_bound_check(
            &source,
            embedding,
            0.5,
            0.5,
            &crate::discrete::DiscreteOptions::default(),
            &opts(),
        )
        .unwrap();
        // Unit variance, squared-error budget 0.5: the Gaussian needs
        // ln(2)/2; the two-point source only ln 2 - H_b(1/8).
        assert!((r_gauss - 0.5 * 2.0f64.ln()).abs() < 1e-6);
        let expect = 2.0f64.ln() - (-(0.125f64.ln()) * 0.125 - 0.875f64.ln() * 0.875);
        assert!((r_disc - expect).abs() < 1e-4, "{r_disc} vs {expect}");
        assert!(r_disc <= r_gauss + 1e-9);
    }

    #[test]
    fn lattice_gaussian_stays_below_its_fit() {
        // Probability lattice approximating a unit Gaussian.
        let n = 17;
        let values: Vec<f64> = (0..n).map(|i| -4.0 + i as f64 * 8.0 / (n - 1) as f64).collect();
        let mut pmf: Vec<f64> = values.iter().map(|v| (-0.5 * v * v).exp()).collect();
        let total: f64 = pmf.iter().sum();
        for p in &mut pmf {
            *p /= total;
        }
        let source = self_state_source(&values, &pmf);
        let embedding = ScalarEmbedding {
            state_values: &values,
            obs_values: &values,
            state_repr_values: &values,
            obs_repr_values: &values,
        };
        for budgets in [(0.3, 0.3), (0.5, 0.8)] {
            let (r_disc, r_gauss) = gaussian_upper_bound_check(
                &source,
                embedding,
                budgets.0,
                budgets.1,
                &crate::discrete::DiscreteOptions::default(),
                &opts(),
            )
            .unwrap();
            assert!(
                r_disc <= r_gauss + 1e-6,
                "({}, {}): {r_disc} vs {r_gauss}",
                budgets.0,
                budgets.1
            );
            // The lattice is fine enough to track the Gaussian closely.
            assert!(r_gauss - r_disc < 0.2, "{r_disc} vs {r_gauss}");
        }
    }

    #[test]
    fn non_quadratic_tables_are_rejected() {
        let values = [-1.0, 1.0];
        let joint = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.5]);
        let hamming = DMatrix::from_fn(2, 2, |i, j| if i == j { 0.0 } else { 1.0 });
        let source =
            DiscreteSemanticSource::new(joint, hamming.clone(), hamming).unwrap();
        let embedding = ScalarEmbedding {
            state_values: &values,
            obs_values: &values,
            state_repr_values: &values,
            obs_repr_values: &values,
        };
        assert!(matches!(
            gaussian_upper_bound_check(
                &source,
                embedding,
                0.5,
                0.5,
                &crate::discrete::DiscreteOptions::default(),
                &opts(),
            ),
            Err(Error::InvalidArgument(_))
        ));
    }
}
