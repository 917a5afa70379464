//! Log-barrier engine for determinant maximization under an upper cap.
//!
//! Both Gaussian solver entry points reduce to one of two programs over a
//! symmetric matrix variable `Delta`:
//!
//! * trace program: maximize `logdet Delta` subject to `0 < Delta <= K_X`
//!   (Loewner order) and trace budgets `<A_c, Delta> <= b_c`;
//! * semidefinite program: the same objective and cap with matrix budgets
//!   `P_i Delta P_i^T <= M_i`.
//!
//! Each solve follows the central path of the barrier
//! `F_t = -t logdet Delta - logdet(K_X - Delta) - sum_c ln(b_c - <A_c, Delta>)`
//! (respectively `- sum_i logdet(M_i - P_i Delta P_i^T)`), with `t`
//! multiplied by a fixed factor per stage until the barrier parameter `nu`
//! divided by `t` drops below the gap tolerance.
//!
//! The trace program's Newton system
//! `t Delta^-1 X Delta^-1 + B^-1 X B^-1 + sum_c rho_c <A_c, X> A_c = G`
//! (with `B = K_X - Delta`) is solved without forming an m(m+1)/2-sized
//! Hessian: substituting `X = R Y R^T` for the Cholesky factor `R` of
//! `Delta` and diagonalizing `W = R^T B^-1 R = U diag(w) U^T` turns the
//! rank-free part into the entrywise division `Z_ij = G~_ij / (t + w_i w_j)`,
//! and the trace terms are folded in by a k-dimensional Woodbury correction.
//! That keeps a full Newton step at O(m^3), which is what makes the
//! 128-dimensional sweeps affordable. The semidefinite program assembles the
//! dense Hessian on a scaled upper-triangle vectorization instead and is
//! guarded to small dimensions.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Real;

/// One trace budget `<matrix, Delta> <= budget`.
#[derive(Debug, Clone)]
pub(crate) struct TraceConstraint<T: Real> {
    pub matrix: DMatrix<T>,
    pub budget: T,
}

/// Barrier-method controls shared by both programs.
#[derive(Debug, Clone)]
pub(crate) struct BarrierOptions<T: Real> {
    /// Stop once `nu / t` falls below this (suboptimality in logdet units).
    pub gap_tol: T,
    /// Newton decrement threshold `lambda^2 / 2` for stage centering.
    pub newton_tol: T,
    /// Target for the stationarity residual `|grad F_t|_F / (2t)` at the
    /// final stage; extra polish steps run until it is met or progress
    /// stops. The decrement alone can leave a sizable raw gradient when the
    /// Hessian is ill-conditioned near an active cap.
    pub kkt_tol: T,
    pub t_initial: T,
    pub t_growth: T,
    pub max_newton_per_stage: usize,
    pub max_stages: usize,
}

impl<T: Real> Default for BarrierOptions<T> {
    fn default() -> Self {
        BarrierOptions {
            gap_tol: T::of(1e-9),
            newton_tol: T::tol(1e-11),
            kkt_tol: T::tol(1e-8),
            t_initial: T::one(),
            t_growth: T::of(10.0),
            max_newton_per_stage: 300,
            max_stages: 60,
        }
    }
}

/// Output of the trace program.
#[derive(Debug, Clone)]
pub(crate) struct TraceSolution<T: Real> {
    pub delta: DMatrix<T>,
    /// Slacks `b_c - <A_c, Delta>` at the solution.
    pub trace_slacks: Vec<T>,
    /// Multipliers of the trace budgets in the `-1/2 Delta^-1 + sum lambda_c
    /// A_c + Psi = 0` stationarity convention.
    pub trace_multipliers: Vec<T>,
    /// Dual matrix `Psi` of the cap `Delta <= K_X` in the same convention.
    pub cap_dual: DMatrix<T>,
    /// Guaranteed suboptimality of `-1/2 logdet Delta`, in nats.
    pub gap: T,
    pub newton_iterations: usize,
}

/// Output of the semidefinite program.
#[derive(Debug, Clone)]
pub(crate) struct PsdSolution<T: Real> {
    pub delta: DMatrix<T>,
    /// Dual matrices `C_i^-1 / (2t)`, one per factor (cap first).
    pub factor_duals: Vec<DMatrix<T>>,
    pub gap: T,
    pub newton_iterations: usize,
}

/// A barrier program the stage loop can drive: it evaluates the barrier
/// objective (None outside the strict interior) and produces gradient and
/// Newton direction at interior points.
trait BarrierProgram<T: Real> {
    /// Total barrier parameter of the constraint terms.
    fn nu(&self) -> T;
    /// `F_t(delta)` when strictly feasible.
    fn objective(&self, delta: &DMatrix<T>, t: T) -> Option<T>;
    /// Gradient and Newton direction `D` with `Hess[D] = -g`.
    fn newton_system(&self, delta: &DMatrix<T>, t: T) -> Result<(DMatrix<T>, DMatrix<T>)>;
}

/// Damped-Newton path following. Returns the final iterate, the final `t`,
/// and the Newton step count.
fn run_barrier<T: Real, P: BarrierProgram<T>>(
    program: &P,
    mut delta: DMatrix<T>,
    opts: &BarrierOptions<T>,
) -> Result<(DMatrix<T>, T, usize)> {
    let nu = program.nu();
    let mut t = opts.t_initial;
    let mut total = 0usize;
    for _ in 0..opts.max_stages {
        let mut centered = false;
        let mut best_lambda2 = T::infinity();
        let mut best_iterate: Option<DMatrix<T>> = None;
        let mut stalled = 0usize;
        for _ in 0..opts.max_newton_per_stage {
            let (g, dir) = program.newton_system(&delta, t)?;
            let lambda2 = (-linalg::dot(&g, &dir)).max(T::zero());
            if lambda2 < best_lambda2 * T::of(0.9) {
                best_lambda2 = lambda2;
                best_iterate = Some(delta.clone());
                stalled = 0;
            } else {
                stalled += 1;
            }
            if lambda2 * T::of(0.5) <= opts.newton_tol {
                centered = true;
                break;
            }
            // Near a strongly active cap the slack block of K_X - Delta is
            // conditioned like t, so rounding noise floors the computable
            // decrement well above newton_tol at large t. Once lambda sits
            // in the quadratic-convergence region the un-centered remainder
            // adds only O(lambda^2 / t) to the gap certificate, which is
            // negligible against nu / t, so accept the best iterate rather
            // than failing the stage.
            if stalled >= 15 && best_lambda2 <= T::of(1e-2) {
                if let Some(best) = best_iterate.take() {
                    delta = best;
                }
                centered = true;
                break;
            }
            total += 1;
            let f0 = program.objective(&delta, t).ok_or_else(|| {
                Error::NewtonFailure("barrier iterate left the interior".into())
            })?;
            // Full steps inside the quadratic-convergence region, damped
            // steps outside it; backtracking guards both. The Armijo test
            // carries a rounding allowance because F_t grows like t and the
            // expected decrease near centering is far below eps * |F_t|.
            let lambda = lambda2.sqrt();
            let mut step = if lambda <= T::of(0.25) {
                T::one()
            } else {
                T::one() / (T::one() + lambda)
            };
            let noise = (f0.abs() + T::one()) * T::eps() * T::of(16.0);
            let mut accepted = false;
            for _ in 0..80 {
                let cand = &delta + &dir * step;
                if let Some(f1) = program.objective(&cand, t) {
                    if f1 <= f0 - T::of(0.25) * step * lambda2 + noise {
                        delta = linalg::symmetrize(&cand);
                        accepted = true;
                        break;
                    }
                }
                step *= T::of(0.5);
            }
            if !accepted {
                return Err(Error::NewtonFailure(
                    "line search stalled before reaching the centering tolerance".into(),
                ));
            }
        }
        if !centered {
            return Err(Error::MaxIterationsExceeded(format!(
                "Newton centering at barrier parameter t = {:.3e}",
                t.as_f64()
            )));
        }
        if nu / t <= opts.gap_tol {
            polish(program, &mut delta, t, opts, &mut total)?;
            return Ok((delta, t, total));
        }
        t *= opts.t_growth;
    }
    Err(Error::MaxIterationsExceeded(
        "barrier stage schedule exhausted".into(),
    ))
}

/// Extra full Newton steps at the final `t` that drive the raw gradient
/// norm down to the multiplier-accuracy target, keeping the best iterate
/// seen. Best-effort: stops quietly at the floating-point noise floor.
fn polish<T: Real, P: BarrierProgram<T>>(
    program: &P,
    delta: &mut DMatrix<T>,
    t: T,
    opts: &BarrierOptions<T>,
    total: &mut usize,
) -> Result<()> {
    let target = opts.kkt_tol * t * T::of(2.0);
    let mut best = delta.clone();
    let mut best_norm = T::infinity();
    for _ in 0..25 {
        let (g, dir) = program.newton_system(delta, t)?;
        let gnorm = linalg::frobenius(&g);
        if gnorm < best_norm {
            best_norm = gnorm;
            best = delta.clone();
        }
        if gnorm <= target || gnorm > best_norm * T::of(10.0) {
            break;
        }
        let mut step = T::one();
        let mut moved = false;
        for _ in 0..60 {
            let cand = delta.clone() + &dir * step;
            if program.objective(&cand, t).is_some() {
                *delta = linalg::symmetrize(&cand);
                moved = true;
                break;
            }
            step *= T::of(0.5);
        }
        if !moved {
            break;
        }
        *total += 1;
    }
    *delta = best;
    Ok(())
}

/// Shared interior start `Delta_0 = eps K_X`, with `eps` small enough to
/// clear half of every budget and halved further if roundoff still lands
/// outside the interior.
fn interior_start<T: Real, P: BarrierProgram<T>>(
    program: &P,
    kx: &DMatrix<T>,
    mut eps: T,
    t_initial: T,
) -> Result<DMatrix<T>> {
    for _ in 0..200 {
        let start = kx * eps;
        if program.objective(&start, t_initial).is_some() {
            return Ok(start);
        }
        eps *= T::of(0.5);
    }
    Err(Error::InfeasibleBudget(
        "no strictly interior starting point found".into(),
    ))
}

// ---------------------------------------------------------------------------
// Trace program
// ---------------------------------------------------------------------------

struct TraceProgram<'a, T: Real> {
    kx: &'a DMatrix<T>,
    constraints: &'a [TraceConstraint<T>],
}

impl<T: Real> BarrierProgram<T> for TraceProgram<'_, T> {
    fn nu(&self) -> T {
        T::of((self.kx.nrows() + self.constraints.len()) as f64)
    }

    fn objective(&self, delta: &DMatrix<T>, t: T) -> Option<T> {
        let ld_delta = linalg::cholesky_logdet(delta)?;
        let b = self.kx - delta;
        let ld_b = linalg::cholesky_logdet(&b)?;
        let mut f = -t * ld_delta - ld_b;
        for c in self.constraints {
            let s = c.budget - linalg::dot(&c.matrix, delta);
            if s <= T::zero() {
                return None;
            }
            f -= s.ln();
        }
        Some(f)
    }

    fn newton_system(&self, delta: &DMatrix<T>, t: T) -> Result<(DMatrix<T>, DMatrix<T>)> {
        let interior = || Error::NewtonFailure("Newton system requested outside the interior".into());
        let m = delta.nrows();
        let chol = delta.clone().cholesky().ok_or_else(interior)?;
        let r = chol.l();
        let delta_inv = chol.inverse();
        let b = self.kx - delta;
        let b_inv = linalg::spd_inverse(&b).ok_or_else(interior)?;

        // Gradient of F_t.
        let mut g = &b_inv - &delta_inv * t;
        let mut slacks = Vec::with_capacity(self.constraints.len());
        for c in self.constraints {
            let s = c.budget - linalg::dot(&c.matrix, delta);
            if s <= T::zero() {
                return Err(interior());
            }
            g += &c.matrix / s;
            slacks.push(s);
        }
        g = linalg::symmetrize(&g);

        // Inverse of the rank-free Hessian part through the joint
        // diagonalization of t*Delta^-1 (.) Delta^-1 + B^-1 (.) B^-1.
        let w = linalg::symmetrize(&(r.transpose() * &b_inv * &r));
        let eig = linalg::sym_eigen(&w);
        let ru = &r * &eig.vectors;
        let rut = ru.transpose();
        let apply_h0_inv = |rhs: &DMatrix<T>| -> DMatrix<T> {
            let mut z = &rut * rhs * &ru;
            for i in 0..m {
                for j in 0..m {
                    z[(i, j)] /= t + eig.values[i].max(T::zero()) * eig.values[j].max(T::zero());
                }
            }
            linalg::symmetrize(&(&ru * z * &rut))
        };

        let x0 = apply_h0_inv(&(-&g));
        let k = self.constraints.len();
        if k == 0 {
            return Ok((g, x0));
        }
        // Woodbury correction for the rank-k trace part of the Hessian.
        let vs: Vec<DMatrix<T>> = self
            .constraints
            .iter()
            .map(|c| apply_h0_inv(&c.matrix))
            .collect();
        let mut small = DMatrix::zeros(k, k);
        let mut u = DVector::zeros(k);
        for c in 0..k {
            for d in 0..k {
                small[(c, d)] = linalg::dot(&self.constraints[c].matrix, &vs[d]);
            }
            small[(c, c)] += slacks[c] * slacks[c];
            u[c] = linalg::dot(&self.constraints[c].matrix, &x0);
        }
        let gamma = small
            .lu()
            .solve(&u)
            .ok_or_else(|| Error::NewtonFailure("singular Woodbury system".into()))?;
        let mut dir = x0;
        for c in 0..k {
            dir -= &vs[c] * gamma[c];
        }
        Ok((g, linalg::symmetrize(&dir)))
    }
}

/// Solves the trace program. Budgets must be finite and positive; callers
/// drop vacuous constraints and map nonpositive budgets to their own
/// infeasibility verdicts first.
pub(crate) fn solve_trace_program<T: Real>(
    kx: &DMatrix<T>,
    constraints: &[TraceConstraint<T>],
    opts: &BarrierOptions<T>,
) -> Result<TraceSolution<T>> {
    let m = kx.nrows();
    for c in constraints {
        if !(c.budget > T::zero()) || !c.budget.finite() {
            return Err(Error::InfeasibleBudget(format!(
                "trace budget {} admits no strictly interior point",
                c.budget.as_f64()
            )));
        }
        if c.matrix.nrows() != m || c.matrix.ncols() != m {
            return Err(Error::DimensionMismatch(format!(
                "constraint matrix is {}x{}, expected {}x{}",
                c.matrix.nrows(),
                c.matrix.ncols(),
                m,
                m
            )));
        }
    }

    // The cap itself may satisfy every budget, in which case Delta = K_X is
    // exactly optimal: stationarity holds with the cap dual alone,
    // Psi = 1/2 K_X^-1.
    let slack_at_cap: Vec<T> = constraints
        .iter()
        .map(|c| c.budget - linalg::dot(&c.matrix, kx))
        .collect();
    if slack_at_cap.iter().all(|&s| s >= T::zero()) {
        let cap_dual = linalg::spd_inverse(kx)
            .ok_or_else(|| Error::NotPositiveDefinite("determinant cap".into()))?
            * T::of(0.5);
        return Ok(TraceSolution {
            delta: kx.clone(),
            trace_slacks: slack_at_cap,
            trace_multipliers: vec![T::zero(); constraints.len()],
            cap_dual,
            gap: T::zero(),
            newton_iterations: 0,
        });
    }

    let program = TraceProgram { kx, constraints };
    let mut eps = T::of(0.5);
    for c in constraints {
        let on_cap = linalg::dot(&c.matrix, kx);
        if on_cap > T::zero() {
            eps = eps.min(T::of(0.5) * c.budget / on_cap);
        }
    }
    let start = interior_start(&program, kx, eps, opts.t_initial)?;
    let (delta, t_final, newton_iterations) = run_barrier(&program, start, opts)?;

    let half = T::of(0.5);
    let two_t = t_final * T::of(2.0);
    let trace_slacks: Vec<T> = constraints
        .iter()
        .map(|c| c.budget - linalg::dot(&c.matrix, &delta))
        .collect();
    let trace_multipliers: Vec<T> = trace_slacks.iter().map(|&s| T::one() / (two_t * s)).collect();
    let b = kx - &delta;
    let b_inv = linalg::spd_inverse(&b)
        .ok_or_else(|| Error::NewtonFailure("final iterate touches the cap".into()))?;
    let cap_dual = linalg::symmetrize(&(b_inv / two_t));
    Ok(TraceSolution {
        delta,
        trace_slacks,
        trace_multipliers,
        cap_dual,
        gap: program.nu() / t_final * half,
        newton_iterations,
    })
}

// ---------------------------------------------------------------------------
// Semidefinite program
// ---------------------------------------------------------------------------

/// One matrix budget `P Delta P^T <= M`. The cap is expressed the same way
/// with `P = I`, `M = K_X`.
#[derive(Debug, Clone)]
pub(crate) struct PsdFactor<T: Real> {
    pub bound: DMatrix<T>,
    pub map: DMatrix<T>,
}

struct PsdProgram<'a, T: Real> {
    factors: &'a [PsdFactor<T>],
}

impl<T: Real> PsdProgram<'_, T> {
    fn slack(&self, factor: &PsdFactor<T>, delta: &DMatrix<T>) -> DMatrix<T> {
        linalg::symmetrize(&(&factor.bound - &factor.map * delta * factor.map.transpose()))
    }
}

impl<T: Real> BarrierProgram<T> for PsdProgram<'_, T> {
    fn nu(&self) -> T {
        T::of(self.factors.iter().map(|f| f.bound.nrows()).sum::<usize>() as f64)
    }

    fn objective(&self, delta: &DMatrix<T>, t: T) -> Option<T> {
        let mut f = -t * linalg::cholesky_logdet(delta)?;
        for factor in self.factors {
            f -= linalg::cholesky_logdet(&self.slack(factor, delta))?;
        }
        Some(f)
    }

    fn newton_system(&self, delta: &DMatrix<T>, t: T) -> Result<(DMatrix<T>, DMatrix<T>)> {
        let interior = || Error::NewtonFailure("Newton system requested outside the interior".into());
        let m = delta.nrows();
        let delta_inv = linalg::spd_inverse(delta).ok_or_else(interior)?;
        let mut slack_invs = Vec::with_capacity(self.factors.len());
        let mut g = -&delta_inv * t;
        for factor in self.factors {
            let c_inv = linalg::spd_inverse(&self.slack(factor, delta)).ok_or_else(interior)?;
            g += factor.map.transpose() * &c_inv * &factor.map;
            slack_invs.push(c_inv);
        }
        g = linalg::symmetrize(&g);

        let apply_hessian = |x: &DMatrix<T>| -> DMatrix<T> {
            let mut y = &delta_inv * x * &delta_inv * t;
            for (factor, c_inv) in self.factors.iter().zip(&slack_invs) {
                let inner = c_inv * &factor.map * x * factor.map.transpose() * c_inv;
                y += factor.map.transpose() * inner * &factor.map;
            }
            linalg::symmetrize(&y)
        };

        // Dense Hessian on the scaled-triangle vectorization.
        let n = svec_dim(m);
        let mut hess = DMatrix::zeros(n, n);
        for (k, basis) in SvecBasis::new(m).enumerate() {
            hess.set_column(k, &svec(&apply_hessian(&basis)));
        }
        let rhs = svec(&(-&g));
        let sol = linalg::symmetrize(&hess)
            .cholesky()
            .map(|ch| ch.solve(&rhs))
            .or_else(|| hess.lu().solve(&rhs))
            .ok_or_else(|| Error::NewtonFailure("singular dense Hessian".into()))?;
        Ok((g, unsvec(&sol, m)))
    }
}

/// Solves the semidefinite program. `factors[0]` must be the cap
/// `(K_X, I)`; the dimension guard keeps the dense Hessian tractable.
pub(crate) fn solve_psd_program<T: Real>(
    kx: &DMatrix<T>,
    factors: &[PsdFactor<T>],
    opts: &BarrierOptions<T>,
) -> Result<PsdSolution<T>> {
    let m = kx.nrows();
    if m > 32 {
        return Err(Error::TooLarge(format!(
            "semidefinite budgets assemble a dense {0}x{0} Hessian; dimension {1} > 32",
            svec_dim(m),
            m
        )));
    }
    for factor in factors {
        if factor.map.ncols() != m || factor.bound.nrows() != factor.map.nrows() {
            return Err(Error::DimensionMismatch(
                "matrix budget dimensions do not match the model".into(),
            ));
        }
    }

    let program = PsdProgram { factors };
    // Delta = K_X exactly optimal when already feasible.
    let cap_feasible = factors.iter().all(|f| {
        let s = program.slack(f, kx);
        let (lo, _) = linalg::eigenvalue_range(&s);
        lo >= -T::tol(1e-12) * linalg::max_abs(&f.bound).max(T::one())
    });
    if cap_feasible {
        // Delta = K_X with the cap dual 1/2 K_X^-1 satisfies stationarity
        // exactly; the budget duals vanish.
        let mut factor_duals: Vec<DMatrix<T>> = factors
            .iter()
            .map(|f| DMatrix::zeros(f.bound.nrows(), f.bound.nrows()))
            .collect();
        factor_duals[0] = linalg::spd_inverse(kx)
            .ok_or_else(|| Error::NotPositiveDefinite("determinant cap".into()))?
            * T::of(0.5);
        return Ok(PsdSolution {
            delta: kx.clone(),
            factor_duals,
            gap: T::zero(),
            newton_iterations: 0,
        });
    }

    let start = interior_start(&program, kx, T::of(0.5), opts.t_initial)?;
    let (delta, t_final, newton_iterations) = run_barrier(&program, start, opts)?;

    let two_t = t_final * T::of(2.0);
    let mut factor_duals = Vec::with_capacity(factors.len());
    for factor in factors {
        let c_inv = linalg::spd_inverse(&program.slack(factor, &delta))
            .ok_or_else(|| Error::NewtonFailure("final iterate touches a matrix budget".into()))?;
        factor_duals.push(linalg::symmetrize(&(c_inv / two_t)));
    }
    Ok(PsdSolution {
        delta,
        factor_duals,
        gap: program.nu() / t_final * T::of(0.5),
        newton_iterations,
    })
}

// ---------------------------------------------------------------------------
// Scaled-triangle vectorization
// ---------------------------------------------------------------------------

fn svec_dim(m: usize) -> usize {
    m * (m + 1) / 2
}

/// Stacks the upper triangle with off-diagonal entries scaled by sqrt(2),
/// so Euclidean inner products of vectors match Frobenius inner products of
/// the symmetric matrices.
fn svec<T: Real>(x: &DMatrix<T>) -> DVector<T> {
    let m = x.nrows();
    let root2 = T::of(2.0).sqrt();
    let mut v = DVector::zeros(svec_dim(m));
    let mut k = 0;
    for i in 0..m {
        for j in i..m {
            v[k] = if i == j { x[(i, i)] } else { x[(i, j)] * root2 };
            k += 1;
        }
    }
    v
}

fn unsvec<T: Real>(v: &DVector<T>, m: usize) -> DMatrix<T> {
    let inv_root2 = T::one() / T::of(2.0).sqrt();
    let mut x = DMatrix::zeros(m, m);
    let mut k = 0;
    for i in 0..m {
        for j in i..m {
            if i == j {
                x[(i, i)] = v[k];
            } else {
                x[(i, j)] = v[k] * inv_root2;
                x[(j, i)] = x[(i, j)];
            }
            k += 1;
        }
    }
    x
}

/// Iterator over the orthonormal symmetric basis matrices matching [`svec`].
struct SvecBasis<T: Real> {
    m: usize,
    i: usize,
    j: usize,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Real> SvecBasis<T> {
    fn new(m: usize) -> Self {
        SvecBasis {
            m,
            i: 0,
            j: 0,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<T: Real> Iterator for SvecBasis<T> {
    type Item = DMatrix<T>;

    fn next(&mut self) -> Option<DMatrix<T>> {
        if self.i >= self.m {
            return None;
        }
        let (i, j) = (self.i, self.j);
        let mut e = DMatrix::zeros(self.m, self.m);
        if i == j {
            e[(i, i)] = T::one();
        } else {
            let half_root2 = T::one() / T::of(2.0).sqrt();
            e[(i, j)] = half_root2;
            e[(j, i)] = half_root2;
        }
        self.j += 1;
        if self.j >= self.m {
            self.i += 1;
            self.j = self.i;
        }
        Some(e)
    }
}
