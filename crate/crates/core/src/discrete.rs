//! Alternating-minimization solvers for finite-alphabet semantic sources.
//!
//! The hidden-state distortion is first reduced to an equivalent distortion on
//! the observation by conditional expectation. The resulting problem —
//! minimize `I(X; Shat, Xhat)` over conditional pmfs on the product
//! reproduction alphabet subject to expected-distortion budgets — is solved by
//! Blahut–Arimoto inner updates with an outer search over the nonnegative
//! constraint multipliers. A simplex-grid oracle with a convex local polish
//! provides an independent cross-check for tiny instances.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::DiscreteSemanticSource;
use crate::scalar::Real;

/// Exponent cap for the per-letter weights `exp(-lambda * distortion)`.
///
/// Letters priced more than `exp(EXPONENT_CAP)` below the cheapest letter in
/// their row carry no measurable mass at any tolerance used here; capping
/// keeps single factors away from hard underflow for both `f32` and `f64`.
const EXPONENT_CAP: f64 = 100.0;

/// Tuning knobs for the alternating-minimization solvers.
#[derive(Clone, Debug)]
pub struct DiscreteOptions<T: Real> {
    /// Inner-loop stop: Lagrangian decrease per iteration below this value.
    pub inner_tol: T,
    /// Inner iteration cap per multiplier evaluation.
    pub max_inner_iterations: usize,
    /// Target `|achieved - budget|` for constraints held with a positive
    /// multiplier, relative to `max(1, |budget|)`.
    pub budget_tol: T,
    /// Sweep cap for the coordinate search used with three or more
    /// simultaneously active constraints.
    pub max_outer_sweeps: usize,
}

impl<T: Real> Default for DiscreteOptions<T> {
    fn default() -> Self {
        Self {
            inner_tol: T::tol(1e-9),
            max_inner_iterations: 5000,
            budget_tol: T::tol(1e-6),
            max_outer_sweeps: 80,
        }
    }
}

/// State distortion collapsed onto the observation alphabet.
#[derive(Clone, Debug)]
pub struct ReducedDistortion<T: Real> {
    /// `table[(x, shat)] = sum_s p(s | x) * d_s(s, shat)`.
    pub table: DMatrix<T>,
}

/// Collapses the state distortion onto the observation alphabet by taking the
/// conditional expectation of `d_s` given each observation symbol.
pub fn reduce_state_distortion<T: Real>(source: &DiscreteSemanticSource<T>) -> ReducedDistortion<T> {
    let nx = source.n_obs();
    let ns = source.n_states();
    let nr = source.n_state_repr();
    let d_s = source.state_distortion();
    let table = DMatrix::from_fn(nx, nr, |x, shat| {
        (0..ns)
            .map(|s| source.state_given_obs(s, x) * d_s[(s, shat)])
            .sum()
    });
    ReducedDistortion { table }
}

/// Solution of a discrete budget-constrained rate computation.
///
/// `conditional_pmf` is the reproduction kernel `q(v | x)` on the product
/// alphabet whose axes are the state reproductions (in source order) followed
/// by the observation reproduction, flattened row-major with the observation
/// axis fastest. Multipliers follow the convention that the minimized
/// Lagrangian is `I + sum_c lambda_c * E[d_c]`; a constraint is flagged
/// active exactly when its multiplier is positive.
#[derive(Clone, Debug)]
pub struct DiscreteRdfSolution<T: Real> {
    /// Achieved rate, in nats.
    pub rate: T,
    /// Reproduction kernel, `n_obs` rows by product-alphabet columns.
    pub conditional_pmf: DMatrix<T>,
    /// Achieved reduced state distortions, one per state constraint.
    pub state_distortions: Vec<T>,
    /// Achieved observation distortion.
    pub obs_distortion: T,
    /// Multipliers of the state constraints.
    pub state_multipliers: Vec<T>,
    /// Multiplier of the observation constraint.
    pub obs_multiplier: T,
    /// Per-state-constraint activity flags.
    pub state_active: Vec<bool>,
    /// Observation-constraint activity flag.
    pub obs_active: bool,
    /// Total inner iterations spent across the whole multiplier search.
    pub iterations: usize,
    /// Whether the inner loop converged and every held budget was met.
    pub converged: bool,
}

impl<T: Real> DiscreteRdfSolution<T> {
    /// Achieved state distortion of the single-state problem.
    pub fn state_distortion(&self) -> T {
        self.state_distortions[0]
    }

    /// State multiplier of the single-state problem.
    pub fn state_multiplier(&self) -> T {
        self.state_multipliers[0]
    }
}

// ---------------------------------------------------------------------------
// Product alphabet bookkeeping
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
struct ProductAlphabet {
    sizes: Vec<usize>,
    strides: Vec<usize>,
    len: usize,
}

impl ProductAlphabet {
    fn new(sizes: Vec<usize>) -> Self {
        let mut strides = vec![1usize; sizes.len()];
        for i in (0..sizes.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * sizes[i + 1];
        }
        let len = sizes.iter().product();
        Self { sizes, strides, len }
    }

    fn coord(&self, v: usize, axis: usize) -> usize {
        (v / self.strides[axis]) % self.sizes[axis]
    }
}

/// One expected-distortion constraint on the product alphabet.
///
/// When `axis` is set the table has one column per letter of that axis and the
/// distortion depends on `v` only through that coordinate; otherwise the table
/// spans the full product alphabet.
struct BaConstraint<T: Real> {
    table: DMatrix<T>,
    budget: T,
    axis: Option<usize>,
}

struct EngineSolution<T: Real> {
    q: DMatrix<T>,
    rate: T,
    achieved: Vec<T>,
    multipliers: Vec<T>,
    iterations: usize,
    converged: bool,
}

fn column_min<T: Real>(table: &DMatrix<T>, row: usize) -> T {
    let mut best = T::infinity();
    for c in 0..table.ncols() {
        best = best.min(table[(row, c)]);
    }
    best
}

/// Smallest positive within-row difference between distortion levels; `None`
/// when every row is constant.
fn positive_gap<T: Real>(table: &DMatrix<T>) -> Option<T> {
    let mut gap = T::infinity();
    let mut row = Vec::with_capacity(table.ncols());
    for x in 0..table.nrows() {
        row.clear();
        row.extend((0..table.ncols()).map(|c| table[(x, c)]));
        row.sort_by(|a, b| a.partial_cmp(b).expect("distortions are finite"));
        for pair in row.windows(2) {
            let d = pair[1] - pair[0];
            if d > T::zero() {
                gap = gap.min(d);
            }
        }
    }
    gap.finite().then_some(gap)
}

/// Composite per-letter weights `prod_c exp(-lambda_c * d_c(x, v))`, shifted
/// per row and per constraint so every row attains weight one at some letter.
fn composite_weights<T: Real>(
    nx: usize,
    alphabet: &ProductAlphabet,
    constraints: &[BaConstraint<T>],
    lambda: &[T],
) -> DMatrix<T> {
    let cap = T::of(EXPONENT_CAP);
    let mut w = DMatrix::from_element(nx, alphabet.len, T::one());
    for (c, &lam) in constraints.iter().zip(lambda) {
        if lam == T::zero() {
            continue;
        }
        match c.axis {
            Some(axis) => {
                let na = alphabet.sizes[axis];
                let mut factors = vec![T::one(); na];
                for x in 0..nx {
                    let shift = column_min(&c.table, x);
                    for (a, f) in factors.iter_mut().enumerate() {
                        *f = (-(lam * (c.table[(x, a)] - shift)).min(cap)).exp();
                    }
                    for v in 0..alphabet.len {
                        w[(x, v)] *= factors[alphabet.coord(v, axis)];
                    }
                }
            }
            None => {
                for x in 0..nx {
                    let shift = column_min(&c.table, x);
                    for v in 0..alphabet.len {
                        w[(x, v)] *= (-(lam * (c.table[(x, v)] - shift)).min(cap)).exp();
                    }
                }
            }
        }
    }
    w
}

/// Alternating minimization of the Lagrangian at fixed multipliers.
///
/// `r` holds the reproduction marginal and is used as a warm start: a small
/// `blend` of the uniform distribution is mixed in on entry so letters
/// extinguished by a previous multiplier evaluation can re-enter (pass zero to
/// keep the marginal untouched, e.g. when re-evaluating at unchanged
/// multipliers), and it holds the marginal of the returned kernel on exit.
/// The per-iteration objective `-sum_x p_x ln Z_x` is nonincreasing; the loop
/// stops when it decreases by less than `inner_tol`.
fn ba_fixed<T: Real>(
    p: &[T],
    w: &DMatrix<T>,
    r: &mut [T],
    blend: T,
    opts: &DiscreteOptions<T>,
) -> (DMatrix<T>, usize, bool) {
    let nx = p.len();
    let nv = r.len();
    if blend > T::zero() {
        let uniform = T::one() / T::of(nv as f64);
        let mut total = T::zero();
        for rv in r.iter_mut() {
            *rv = (T::one() - blend) * *rv + blend * uniform;
            total += *rv;
        }
        for rv in r.iter_mut() {
            *rv /= total;
        }
    }

    let floor = T::of(1e-280);
    let mut q = DMatrix::zeros(nx, nv);
    let mut prev_f = T::infinity();
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..opts.max_inner_iterations {
        iterations = it + 1;
        let mut f = T::zero();
        let mut r_next = vec![T::zero(); nv];
        for x in 0..nx {
            let mut z = T::zero();
            for v in 0..nv {
                z += r[v] * w[(x, v)];
            }
            if z <= floor {
                // Every weighted letter underflowed; park the row on its
                // cheapest letter instead of dividing by zero.
                let mut best = 0;
                for v in 1..nv {
                    if w[(x, v)] > w[(x, best)] {
                        best = v;
                    }
                }
                for v in 0..nv {
                    q[(x, v)] = if v == best { T::one() } else { T::zero() };
                }
                r_next[best] += p[x];
                f -= p[x] * floor.ln();
                continue;
            }
            f -= p[x] * z.ln();
            let inv = T::one() / z;
            for v in 0..nv {
                let qv = r[v] * w[(x, v)] * inv;
                q[(x, v)] = qv;
                r_next[v] += p[x] * qv;
            }
        }
        r.copy_from_slice(&r_next);
        debug_assert!(
            it == 0
                || !f.finite()
                || !prev_f.finite()
                || f <= prev_f + T::eps() * T::of(64.0) * (T::one() + prev_f.abs()),
            "Lagrangian increased during alternating minimization"
        );
        if (prev_f - f).abs() < opts.inner_tol {
            converged = true;
            break;
        }
        prev_f = f;
    }
    (q, iterations, converged)
}

fn achieved_distortions<T: Real>(
    p: &[T],
    alphabet: &ProductAlphabet,
    q: &DMatrix<T>,
    constraints: &[BaConstraint<T>],
) -> Vec<T> {
    constraints
        .iter()
        .map(|c| {
            let mut total = T::zero();
            for x in 0..p.len() {
                let mut row = T::zero();
                match c.axis {
                    Some(axis) => {
                        for v in 0..alphabet.len {
                            row += q[(x, v)] * c.table[(x, alphabet.coord(v, axis))];
                        }
                    }
                    None => {
                        for v in 0..alphabet.len {
                            row += q[(x, v)] * c.table[(x, v)];
                        }
                    }
                }
                total += p[x] * row;
            }
            total
        })
        .collect()
}

/// Mutual information of the joint law `p(x) q(v | x)`, clamped at zero.
fn mutual_information<T: Real>(p: &[T], q: &DMatrix<T>) -> T {
    let nx = q.nrows();
    let nv = q.ncols();
    let mut r = vec![T::zero(); nv];
    for x in 0..nx {
        for v in 0..nv {
            r[v] += p[x] * q[(x, v)];
        }
    }
    let mut info = T::zero();
    for x in 0..nx {
        for v in 0..nv {
            let qv = q[(x, v)];
            if qv > T::zero() && r[v] > T::zero() {
                info += p[x] * qv * (qv / r[v]).ln();
            }
        }
    }
    info.max(T::zero())
}

// ---------------------------------------------------------------------------
// Outer multiplier search
// ---------------------------------------------------------------------------

/// Uniform fraction mixed into every warm-started marginal. Small enough to
/// keep dying letters from perturbing achieved distortions near the stopping
/// tolerance, large enough to revive hard-underflowed letters.
const WARM_BLEND: f64 = 1e-9;

/// Shared state of one multiplier search: the reproduction marginal is carried
/// between evaluations as a warm start and iteration counts are accumulated.
struct Search<'a, T: Real> {
    p: &'a [T],
    alphabet: &'a ProductAlphabet,
    constraints: &'a [BaConstraint<T>],
    opts: &'a DiscreteOptions<T>,
    warm_r: Vec<T>,
    lambda_max: Vec<T>,
    iterations: usize,
    last_converged: bool,
}

impl<'a, T: Real> Search<'a, T> {
    fn new(
        p: &'a [T],
        alphabet: &'a ProductAlphabet,
        constraints: &'a [BaConstraint<T>],
        opts: &'a DiscreteOptions<T>,
    ) -> Self {
        let lambda_max = constraints
            .iter()
            .map(|c| {
                let gap = positive_gap(&c.table).unwrap_or_else(|| T::of(1e-6));
                T::of(50.0) / gap
            })
            .collect();
        let nv = alphabet.len;
        Self {
            p,
            alphabet,
            constraints,
            opts,
            warm_r: vec![T::one() / T::of(nv as f64); nv],
            lambda_max,
            iterations: 0,
            last_converged: true,
        }
    }

    fn budget_tol(&self, c: usize) -> T {
        self.opts.budget_tol * T::one().max(self.constraints[c].budget.abs())
    }

    /// Slack allowed above a budget before a point counts as infeasible.
    /// Kept well under the reporting guarantee of `budget + 1e-7`.
    fn feasible_slack(&self, c: usize) -> T {
        (self.budget_tol(c) * T::of(0.5)).min(T::tol(5e-8))
    }

    fn eval_with_blend(&mut self, lambda: &[T], blend: T) -> (DMatrix<T>, Vec<T>) {
        let w = composite_weights(self.p.len(), self.alphabet, self.constraints, lambda);
        let (q, iters, converged) = ba_fixed(self.p, &w, &mut self.warm_r, blend, self.opts);
        self.iterations += iters;
        self.last_converged = converged;
        let achieved = achieved_distortions(self.p, self.alphabet, &q, self.constraints);
        (q, achieved)
    }

    fn eval(&mut self, lambda: &[T]) -> (DMatrix<T>, Vec<T>) {
        self.eval_with_blend(lambda, T::of(WARM_BLEND))
    }

    /// Re-evaluation at settled multipliers: no uniform re-injection, so the
    /// reported kernel carries no reviving mass on extinguished letters.
    fn eval_final(&mut self, lambda: &[T]) -> (DMatrix<T>, Vec<T>) {
        self.eval_with_blend(lambda, T::zero())
    }

    /// Adjusts `lambda[c]`, holding the other multipliers fixed, until the
    /// achieved distortion of constraint `c` lands in
    /// `[budget - tol, budget + feasible_slack]` or the multiplier reaches
    /// zero with the budget slack. Starts from the current value so repeated
    /// sweeps leave settled coordinates alone.
    fn bisect_coordinate(&mut self, lambda: &mut [T], c: usize, tol: T) -> Result<T> {
        let budget = self.constraints[c].budget;
        let feas = self.feasible_slack(c);
        let current = lambda[c];
        let (_, achieved) = self.eval(lambda);
        let a_cur = achieved[c];
        if a_cur <= budget + feas && (current == T::zero() || a_cur >= budget - tol) {
            return Ok(current);
        }

        let (mut lo, mut hi, mut a_hi) = if a_cur > budget + feas {
            // Needs more pressure: grow the bracket upward.
            let mut lo = current;
            let mut hi = self.lambda_max[c].max(current * T::of(2.0));
            let a_hi;
            let mut growths = 0;
            loop {
                lambda[c] = hi;
                let (_, achieved) = self.eval(lambda);
                if achieved[c] <= budget + feas {
                    a_hi = achieved[c];
                    break;
                }
                lo = hi;
                growths += 1;
                if growths > 8 {
                    return Err(Error::RootFindingFailure(format!(
                        "achieved distortion {:.6e} above budget {:.6e} at multiplier {:.3e}",
                        achieved[c].as_f64(),
                        budget.as_f64(),
                        hi.as_f64()
                    )));
                }
                hi *= T::of(4.0);
            }
            (lo, hi, a_hi)
        } else {
            // Feasible but slack at a positive multiplier: relax toward zero.
            lambda[c] = T::zero();
            let (_, achieved) = self.eval(lambda);
            if achieved[c] <= budget + feas {
                return Ok(T::zero());
            }
            (T::zero(), current, a_cur)
        };

        for _ in 0..200 {
            if budget - a_hi <= tol {
                break;
            }
            let mid = (lo + hi) * T::of(0.5);
            if mid <= lo || mid >= hi {
                break;
            }
            lambda[c] = mid;
            let (_, achieved) = self.eval(lambda);
            if achieved[c] > budget + feas {
                lo = mid;
            } else {
                hi = mid;
                a_hi = achieved[c];
            }
        }
        lambda[c] = hi;
        Ok(hi)
    }

    /// Nested search for exactly two constraints: the inner multiplier is
    /// re-solved for every probe of the outer one, exploiting monotonicity of
    /// the outer achieved distortion along the inner-matched path.
    fn solve_two(&mut self, outer: usize, inner: usize) -> Result<Vec<T>> {
        let budget = self.constraints[outer].budget;
        let tol_out = self.budget_tol(outer);
        let tol_in = self.budget_tol(inner) * T::of(0.25);
        let feas_out = self.feasible_slack(outer);
        let mut lambda = vec![T::zero(); 2];

        // Warm-start the inner bisection from its previous solution.
        let mut inner_guess = T::zero();
        let inner_solve = |s: &mut Self, lam_out: T, guess: &mut T| -> Result<(T, T)> {
            let mut lam = vec![T::zero(); 2];
            lam[outer] = lam_out;
            lam[inner] = *guess;
            let lam_in = s.bisect_coordinate(&mut lam, inner, tol_in)?;
            *guess = lam_in;
            let (_, achieved) = s.eval(&lam);
            Ok((lam_in, achieved[outer]))
        };

        let (lam_in0, g0) = inner_solve(self, T::zero(), &mut inner_guess)?;
        if g0 <= budget + feas_out {
            lambda[inner] = lam_in0;
            return Ok(lambda);
        }
        let mut hi = self.lambda_max[outer];
        let mut lam_in_hi;
        let mut g_hi;
        let mut growths = 0;
        loop {
            let (li, g) = inner_solve(self, hi, &mut inner_guess)?;
            lam_in_hi = li;
            g_hi = g;
            if g_hi <= budget + feas_out {
                break;
            }
            growths += 1;
            if growths > 8 {
                return Err(Error::RootFindingFailure(format!(
                    "outer achieved distortion {:.6e} above budget {:.6e} at multiplier {:.3e}",
                    g_hi.as_f64(),
                    budget.as_f64(),
                    hi.as_f64()
                )));
            }
            hi *= T::of(4.0);
        }
        let mut lo = T::zero();
        for _ in 0..200 {
            if budget - g_hi <= tol_out {
                break;
            }
            let mid = (lo + hi) * T::of(0.5);
            if mid <= lo || mid >= hi {
                break;
            }
            let (li, g) = inner_solve(self, mid, &mut inner_guess)?;
            if g > budget + feas_out {
                lo = mid;
            } else {
                hi = mid;
                lam_in_hi = li;
                g_hi = g;
            }
        }
        lambda[outer] = hi;
        lambda[inner] = lam_in_hi;
        Ok(lambda)
    }

    /// Coordinate sweeps for three or more constraints: each pass re-adjusts
    /// every multiplier with the others held fixed, leaving already settled
    /// coordinates untouched.
    fn solve_many(&mut self) -> Result<Vec<T>> {
        let n = self.constraints.len();
        let mut lambda = vec![T::zero(); n];
        for _ in 0..self.opts.max_outer_sweeps {
            for c in 0..n {
                let tol = self.budget_tol(c) * T::of(0.5);
                self.bisect_coordinate(&mut lambda, c, tol)?;
            }
            let (_, achieved) = self.eval(&lambda);
            let done = (0..n).all(|c| {
                let slack = self.constraints[c].budget - achieved[c];
                slack.abs() <= self.budget_tol(c) || (lambda[c] == T::zero() && slack >= T::zero())
            });
            if done {
                break;
            }
        }
        Ok(lambda)
    }
}

/// Best budget attainable by constraint `c` with a constant reproduction
/// letter, together with that letter, and the pointwise minimum achievable by
/// any reproduction kernel.
fn constraint_extremes<T: Real>(p: &[T], c: &BaConstraint<T>) -> (T, usize, T) {
    let ncols = c.table.ncols();
    let mut best_const = T::infinity();
    let mut best_letter = 0;
    for a in 0..ncols {
        let value = (0..p.len()).map(|x| p[x] * c.table[(x, a)]).sum();
        if value < best_const {
            best_const = value;
            best_letter = a;
        }
    }
    let pointwise = (0..p.len()).map(|x| p[x] * column_min(&c.table, x)).sum();
    (best_const, best_letter, pointwise)
}

/// Solves the budget-constrained rate problem on a product reproduction
/// alphabet.
///
/// Constraints whose budget is met by the best constant letter cost no rate:
/// they are solved for free by attaching a deterministic letter to the paid
/// part of the reproduction, so the multiplier search only runs over the
/// remaining constraints (on the sub-product of their axes).
fn solve_engine<T: Real>(
    p: &[T],
    alphabet: &ProductAlphabet,
    constraints: &[BaConstraint<T>],
    opts: &DiscreteOptions<T>,
) -> Result<EngineSolution<T>> {
    let nx = p.len();
    let n_c = constraints.len();
    for c in constraints {
        if c.budget.is_nan() {
            return Err(Error::InvalidArgument("budget is NaN".into()));
        }
    }
    if n_c > 1 {
        // With several constraints the feasibility and attachment logic below
        // requires each to act on its own axis.
        let mut seen = vec![false; alphabet.sizes.len()];
        for c in constraints {
            let axis = c.axis.ok_or_else(|| {
                Error::InvalidArgument("multiple constraints must be single-axis".into())
            })?;
            if std::mem::replace(&mut seen[axis], true) {
                return Err(Error::InvalidArgument(
                    "two constraints share a reproduction axis".into(),
                ));
            }
        }
    }

    let extremes: Vec<(T, usize, T)> = constraints
        .iter()
        .map(|c| constraint_extremes(p, c))
        .collect();

    let infeasible = (0..n_c).any(|c| {
        let min = extremes[c].2;
        constraints[c].budget < min - T::eps() * T::of(64.0) * (T::one() + min.abs())
    });
    if infeasible {
        return Err(Error::Infeasible {
            min_achievable: extremes.iter().map(|e| e.2.as_f64()).collect(),
            budgets: constraints.iter().map(|c| c.budget.as_f64()).collect(),
        });
    }

    // Merge duplicated constraints: identical tables on two axes are met by
    // mirroring one reproduction coordinate onto the other at no rate cost,
    // so only the tightest budget of each group enters the search. The
    // multiplier is reported on that tightest member.
    let mut dropped = vec![false; n_c];
    let mut effective_budget: Vec<T> = constraints.iter().map(|c| c.budget).collect();
    let mut report_index: Vec<usize> = (0..n_c).collect();
    let mut mirror_axis: Vec<Option<usize>> = vec![None; alphabet.sizes.len()];
    if n_c > 1 {
        for i in 0..n_c {
            if dropped[i] {
                continue;
            }
            for j in i + 1..n_c {
                if !dropped[j] && constraints[i].table == constraints[j].table {
                    dropped[j] = true;
                    if constraints[j].budget < effective_budget[i] {
                        effective_budget[i] = constraints[j].budget;
                        report_index[i] = j;
                    }
                    mirror_axis[constraints[j].axis.unwrap()] =
                        Some(constraints[i].axis.unwrap());
                }
            }
        }
    }
    let work: Vec<usize> = (0..n_c).filter(|&c| !dropped[c]).collect();

    let paid: Vec<usize> = work
        .iter()
        .copied()
        .filter(|&c| effective_budget[c].finite() && extremes[c].0 > effective_budget[c])
        .collect();

    if paid.is_empty() {
        // Zero rate: a constant reproduction letter per axis meets every
        // budget.
        let mut letters = vec![0usize; alphabet.sizes.len()];
        for &c in &work {
            match constraints[c].axis {
                Some(axis) => letters[axis] = extremes[c].1,
                None => {
                    let v = extremes[c].1;
                    for axis in 0..alphabet.sizes.len() {
                        letters[axis] = alphabet.coord(v, axis);
                    }
                }
            }
        }
        for axis in 0..alphabet.sizes.len() {
            if let Some(src) = mirror_axis[axis] {
                letters[axis] = letters[src];
            }
        }
        let v_star: usize = letters
            .iter()
            .zip(&alphabet.strides)
            .map(|(&l, &s)| l * s)
            .sum();
        let q = DMatrix::from_fn(nx, alphabet.len, |_, v| {
            if v == v_star {
                T::one()
            } else {
                T::zero()
            }
        });
        let achieved = achieved_distortions(p, alphabet, &q, constraints);
        return Ok(EngineSolution {
            q,
            rate: T::zero(),
            achieved,
            multipliers: vec![T::zero(); n_c],
            iterations: 0,
            converged: true,
        });
    }

    // Alphabet actually searched: the axes of the paid constraints, or the
    // full product for a paid whole-alphabet constraint.
    let whole_alphabet = paid.iter().any(|&c| constraints[c].axis.is_none());
    let (sub_alphabet, paid_axes) = if whole_alphabet {
        (alphabet.clone(), (0..alphabet.sizes.len()).collect::<Vec<_>>())
    } else {
        let mut axes: Vec<usize> = paid.iter().map(|&c| constraints[c].axis.unwrap()).collect();
        axes.sort_unstable();
        let sizes = axes.iter().map(|&a| alphabet.sizes[a]).collect();
        (ProductAlphabet::new(sizes), axes)
    };
    let sub_constraints: Vec<BaConstraint<T>> = paid
        .iter()
        .map(|&c| BaConstraint {
            table: constraints[c].table.clone(),
            budget: effective_budget[c],
            axis: constraints[c]
                .axis
                .map(|a| paid_axes.iter().position(|&pa| pa == a).unwrap()),
        })
        .collect();

    let mut search = Search::new(p, &sub_alphabet, &sub_constraints, opts);
    let lambda_sub = match sub_constraints.len() {
        1 => {
            let tol = search.budget_tol(0);
            let mut lambda = vec![T::zero()];
            let lam = search.bisect_coordinate(&mut lambda, 0, tol)?;
            vec![lam]
        }
        2 => search.solve_two(0, 1)?,
        _ => search.solve_many()?,
    };
    let (q_sub, _) = search.eval_final(&lambda_sub);
    let iterations = search.iterations;
    let final_converged = search.last_converged;

    // Expand back to the full alphabet. Each free axis is attached as a
    // deterministic function of the paid reproduction: the letter minimizing
    // the posterior-expected distortion of its constraint. A deterministic
    // attachment adds no rate, and its expected distortion is no worse than
    // the best constant letter, which already meets the budget. Mirrored axes
    // copy their source coordinate afterwards.
    let mut attachment: Vec<Option<Vec<usize>>> = vec![None; alphabet.sizes.len()];
    for &c in &work {
        if paid.contains(&c) {
            continue;
        }
        let constraint = &constraints[c];
        let axis = match constraint.axis {
            Some(axis) => axis,
            None => continue, // free whole-alphabet constraint: paid is empty, handled above
        };
        let na = alphabet.sizes[axis];
        let mut map = vec![extremes[c].1; sub_alphabet.len];
        for (v_sub, slot) in map.iter_mut().enumerate() {
            let mut best = T::infinity();
            let mut mass = T::zero();
            for a in 0..na {
                let score: T = (0..nx)
                    .map(|x| p[x] * q_sub[(x, v_sub)] * constraint.table[(x, a)])
                    .sum();
                if score < best {
                    best = score;
                    *slot = a;
                }
            }
            for x in 0..nx {
                mass += p[x] * q_sub[(x, v_sub)];
            }
            if mass == T::zero() {
                *slot = extremes[c].1;
            }
        }
        attachment[axis] = Some(map);
    }

    let mut q = DMatrix::zeros(nx, alphabet.len);
    for v_sub in 0..sub_alphabet.len {
        let mut coords = vec![0usize; alphabet.sizes.len()];
        for (slot, &axis) in paid_axes.iter().enumerate() {
            coords[axis] = sub_alphabet.coord(v_sub, slot);
        }
        for (axis, map) in attachment.iter().enumerate() {
            if let Some(map) = map {
                coords[axis] = map[v_sub];
            }
        }
        for axis in 0..alphabet.sizes.len() {
            if let Some(src) = mirror_axis[axis] {
                coords[axis] = coords[src];
            }
        }
        let v_full: usize = coords
            .iter()
            .zip(&alphabet.strides)
            .map(|(&l, &s)| l * s)
            .sum();
        for x in 0..nx {
            q[(x, v_full)] += q_sub[(x, v_sub)];
        }
    }

    let achieved = achieved_distortions(p, alphabet, &q, constraints);
    let rate = mutual_information(p, &q);
    let mut multipliers = vec![T::zero(); n_c];
    for (slot, &c) in paid.iter().enumerate() {
        multipliers[report_index[c]] = lambda_sub[slot];
    }

    let budgets_met = (0..n_c).all(|c| {
        let tol = opts.budget_tol * T::one().max(constraints[c].budget.abs());
        if multipliers[c] > T::zero() {
            (achieved[c] - constraints[c].budget).abs() <= tol
        } else {
            !constraints[c].budget.finite() || achieved[c] <= constraints[c].budget + tol
        }
    });
    if !budgets_met && !final_converged {
        return Err(Error::MaxIterationsExceeded(format!(
            "inner loop did not converge within {} iterations and budgets remain unmet",
            opts.max_inner_iterations
        )));
    }

    Ok(EngineSolution {
        q,
        rate,
        achieved,
        multipliers,
        iterations,
        converged: final_converged && budgets_met,
    })
}

// ---------------------------------------------------------------------------
// Public solvers
// ---------------------------------------------------------------------------

fn check_shared_observation<T: Real>(sources: &[DiscreteSemanticSource<T>]) -> Result<()> {
    let first = &sources[0];
    for s in &sources[1..] {
        if s.n_obs() != first.n_obs() || s.n_obs_repr() != first.n_obs_repr() {
            return Err(Error::DimensionMismatch(
                "state sources disagree on the observation alphabet".into(),
            ));
        }
        let pmf_gap = first
            .obs_pmf()
            .iter()
            .zip(s.obs_pmf())
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), |acc, d| acc.max(d));
        if pmf_gap > T::tol(1e-9) {
            return Err(Error::InvalidArgument(
                "state sources must share the observation marginal".into(),
            ));
        }
        let d_gap = (s.obs_distortion() - first.obs_distortion()).abs().max();
        if d_gap > T::tol(1e-12) {
            return Err(Error::InvalidArgument(
                "state sources must share the observation distortion".into(),
            ));
        }
    }
    Ok(())
}

/// Computes the rate for `k` hidden states observed through a common `X`,
/// with one reduced-distortion budget per state plus the observation budget.
pub fn solve_discrete_rdf_multi<T: Real>(
    sources: &[DiscreteSemanticSource<T>],
    state_budgets: &[T],
    d_o: T,
    opts: &DiscreteOptions<T>,
) -> Result<DiscreteRdfSolution<T>> {
    if sources.is_empty() {
        return Err(Error::InvalidArgument("no state sources given".into()));
    }
    if sources.len() != state_budgets.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} state sources but {} state budgets",
            sources.len(),
            state_budgets.len()
        )));
    }
    check_shared_observation(sources)?;

    let k = sources.len();
    let first = &sources[0];
    let p: Vec<T> = first.obs_pmf().to_vec();
    let mut sizes: Vec<usize> = sources.iter().map(|s| s.n_state_repr()).collect();
    sizes.push(first.n_obs_repr());
    let alphabet = ProductAlphabet::new(sizes);

    let mut constraints: Vec<BaConstraint<T>> = sources
        .iter()
        .zip(state_budgets)
        .enumerate()
        .map(|(j, (s, &budget))| BaConstraint {
            table: reduce_state_distortion(s).table,
            budget,
            axis: Some(j),
        })
        .collect();
    constraints.push(BaConstraint {
        table: first.obs_distortion().clone(),
        budget: d_o,
        axis: Some(k),
    });

    let engine = solve_engine(&p, &alphabet, &constraints, opts)?;
    Ok(DiscreteRdfSolution {
        rate: engine.rate,
        conditional_pmf: engine.q,
        state_distortions: engine.achieved[..k].to_vec(),
        obs_distortion: engine.achieved[k],
        state_multipliers: engine.multipliers[..k].to_vec(),
        obs_multiplier: engine.multipliers[k],
        state_active: engine.multipliers[..k].iter().map(|&m| m > T::zero()).collect(),
        obs_active: engine.multipliers[k] > T::zero(),
        iterations: engine.iterations,
        converged: engine.converged,
    })
}

/// Computes the two-budget rate of a semantic source: minimum mutual
/// information between the observation and the reproduction pair subject to
/// the reduced state budget `d_s` and the observation budget `d_o`.
pub fn solve_discrete_rdf<T: Real>(
    source: &DiscreteSemanticSource<T>,
    d_s: T,
    d_o: T,
    opts: &DiscreteOptions<T>,
) -> Result<DiscreteRdfSolution<T>> {
    solve_discrete_rdf_multi(std::slice::from_ref(source), &[d_s], d_o, opts)
}

/// Minimizes the rate subject to the single weighted budget
/// `w_s * E[d_s_reduced] + w_o * E[d_o] <= d_bar`.
///
/// The combined multiplier `theta` is reported split by the chain rule as
/// `state_multiplier = theta * w_s` and `obs_multiplier = theta * w_o`.
pub fn solve_discrete_weighted<T: Real>(
    source: &DiscreteSemanticSource<T>,
    w_s: T,
    w_o: T,
    d_bar: T,
    opts: &DiscreteOptions<T>,
) -> Result<DiscreteRdfSolution<T>> {
    if w_s < T::zero() || w_o < T::zero() || (w_s == T::zero() && w_o == T::zero()) {
        return Err(Error::InvalidArgument(
            "weights must be nonnegative and not both zero".into(),
        ));
    }
    let p: Vec<T> = source.obs_pmf().to_vec();
    let nx = source.n_obs();
    let ns_hat = source.n_state_repr();
    let nx_hat = source.n_obs_repr();
    let alphabet = ProductAlphabet::new(vec![ns_hat, nx_hat]);
    let reduced = reduce_state_distortion(source).table;
    let d_o = source.obs_distortion();

    // A zero weight leaves one axis out of the constraint entirely; tagging
    // the constraint to the remaining axis lets the other be attached
    // deterministically instead of dragging dead letters through the search.
    let constraint = if w_s == T::zero() {
        BaConstraint {
            table: d_o.map(|d| w_o * d),
            budget: d_bar,
            axis: Some(1),
        }
    } else if w_o == T::zero() {
        BaConstraint {
            table: reduced.map(|d| w_s * d),
            budget: d_bar,
            axis: Some(0),
        }
    } else {
        let table = DMatrix::from_fn(nx, alphabet.len, |x, v| {
            w_s * reduced[(x, alphabet.coord(v, 0))] + w_o * d_o[(x, alphabet.coord(v, 1))]
        });
        BaConstraint {
            table,
            budget: d_bar,
            axis: None,
        }
    };

    let engine = solve_engine(&p, &alphabet, std::slice::from_ref(&constraint), opts)?;
    let theta = engine.multipliers[0];

    // Reported distortions are re-evaluated separately even though only their
    // weighted combination was constrained.
    let state_achieved: T = (0..nx)
        .map(|x| {
            p[x] * (0..alphabet.len)
                .map(|v| engine.q[(x, v)] * reduced[(x, alphabet.coord(v, 0))])
                .sum()
        })
        .sum();
    let obs_achieved: T = (0..nx)
        .map(|x| {
            p[x] * (0..alphabet.len)
                .map(|v| engine.q[(x, v)] * d_o[(x, alphabet.coord(v, 1))])
                .sum()
        })
        .sum();

    Ok(DiscreteRdfSolution {
        rate: engine.rate,
        conditional_pmf: engine.q,
        state_distortions: vec![state_achieved],
        obs_distortion: obs_achieved,
        state_multipliers: vec![theta * w_s],
        obs_multiplier: theta * w_o,
        state_active: vec![theta > T::zero() && w_s > T::zero()],
        obs_active: theta > T::zero() && w_o > T::zero(),
        iterations: engine.iterations,
        converged: engine.converged,
    })
}

// ---------------------------------------------------------------------------
// Exhaustive oracle
// ---------------------------------------------------------------------------

fn compositions(total: usize, parts: usize) -> Vec<Vec<usize>> {
    fn rec(total: usize, parts: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if parts == 1 {
            prefix.push(total);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for first in 0..=total {
            prefix.push(first);
            rec(total - first, parts - 1, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(total, parts, &mut Vec::new(), &mut out);
    out
}

fn binomial(n: u128, k: u128) -> u128 {
    let k = k.min(n - k);
    let mut result: u128 = 1;
    for i in 0..k {
        result = result.saturating_mul(n - i) / (i + 1);
    }
    result
}

/// Brute-force upper bound on the two-budget rate of a tiny source.
///
/// Every conditional pmf with rows on the simplex grid of `grid_steps`
/// subdivisions is scored, and the best feasible point is polished by
/// projected gradient descent (the objective is convex, so the polish drives
/// the grid estimate toward the true optimum). Independent of the
/// alternating-minimization path.
pub fn exhaustive_discrete_oracle<T: Real>(
    source: &DiscreteSemanticSource<T>,
    d_s: T,
    d_o: T,
    grid_steps: usize,
) -> Result<T> {
    let nx = source.n_obs();
    let nv = source.n_state_repr() * source.n_obs_repr();
    if nx * nv > 16 {
        return Err(Error::TooLarge(format!(
            "oracle limited to 16 joint letters, got {}",
            nx * nv
        )));
    }
    if grid_steps == 0 || grid_steps > 20 {
        return Err(Error::InvalidArgument(
            "grid_steps must lie in 1..=20".into(),
        ));
    }
    let per_row = binomial((grid_steps + nv - 1) as u128, (nv - 1) as u128);
    if per_row > 3_000_000 || per_row.saturating_pow(nx as u32) > 200_000_000 {
        return Err(Error::TooLarge(
            "simplex grid enumeration would exceed the work cap".into(),
        ));
    }

    let p: Vec<T> = source.obs_pmf().to_vec();
    let reduced = reduce_state_distortion(source).table;
    let d_o_table = source.obs_distortion();
    let nx_hat = source.n_obs_repr();
    // v = shat * nx_hat + xhat, matching the solver's layout.
    let table_s = DMatrix::from_fn(nx, nv, |x, v| reduced[(x, v / nx_hat)]);
    let table_o = DMatrix::from_fn(nx, nv, |x, v| d_o_table[(x, v % nx_hat)]);

    let min_s: T = (0..nx).map(|x| p[x] * column_min(&table_s, x)).sum();
    let min_o: T = (0..nx).map(|x| p[x] * column_min(&table_o, x)).sum();
    let slack = T::eps() * T::of(64.0);
    if d_s < min_s - slack * (T::one() + min_s.abs())
        || d_o < min_o - slack * (T::one() + min_o.abs())
    {
        return Err(Error::Infeasible {
            min_achievable: vec![min_s.as_f64(), min_o.as_f64()],
            budgets: vec![d_s.as_f64(), d_o.as_f64()],
        });
    }

    let comps = compositions(grid_steps, nv);
    let g = T::of(grid_steps as f64);
    // Per row and grid point: achieved distortions and sum q ln q.
    let mut ds_row = vec![vec![T::zero(); comps.len()]; nx];
    let mut do_row = vec![vec![T::zero(); comps.len()]; nx];
    let mut qlq_row = vec![vec![T::zero(); comps.len()]; nx];
    for x in 0..nx {
        for (i, comp) in comps.iter().enumerate() {
            let mut ds = T::zero();
            let mut dd = T::zero();
            let mut qlq = T::zero();
            for (v, &c) in comp.iter().enumerate() {
                if c == 0 {
                    continue;
                }
                let qv = T::of(c as f64) / g;
                ds += qv * table_s[(x, v)];
                dd += qv * table_o[(x, v)];
                qlq += qv * qv.ln();
            }
            ds_row[x][i] = ds;
            do_row[x][i] = dd;
            qlq_row[x][i] = qlq;
        }
    }

    let grid_q = |choice: &[usize]| -> DMatrix<T> {
        DMatrix::from_fn(nx, nv, |x, v| T::of(comps[choice[x]][v] as f64) / g)
    };

    // Odometer over one grid choice per row.
    let mut best_info = T::infinity();
    let mut best_choice: Option<Vec<usize>> = None;
    let mut choice = vec![0usize; nx];
    let mut r = vec![T::zero(); nv];
    'outer: loop {
        let mut ds = T::zero();
        let mut dd = T::zero();
        for x in 0..nx {
            ds += p[x] * ds_row[x][choice[x]];
            dd += p[x] * do_row[x][choice[x]];
        }
        if ds <= d_s + slack && dd <= d_o + slack {
            for rv in r.iter_mut() {
                *rv = T::zero();
            }
            let mut info = T::zero();
            for x in 0..nx {
                info += p[x] * qlq_row[x][choice[x]];
                for (v, &c) in comps[choice[x]].iter().enumerate() {
                    r[v] += p[x] * T::of(c as f64) / g;
                }
            }
            for &rv in &r {
                if rv > T::zero() {
                    info -= rv * rv.ln();
                }
            }
            if info < best_info {
                best_info = info;
                best_choice = Some(choice.clone());
            }
        }
        for x in 0..nx {
            choice[x] += 1;
            if choice[x] < comps.len() {
                continue 'outer;
            }
            choice[x] = 0;
        }
        break;
    }

    // Pointwise distortion-minimizing deterministic kernel: strictly feasible
    // whenever the problem is, and the anchor for exact feasibility repairs.
    let anchor = DMatrix::from_fn(nx, nv, |x, v| {
        let best_s = (0..source.n_state_repr())
            .min_by(|&a, &b| {
                reduced[(x, a)]
                    .partial_cmp(&reduced[(x, b)])
                    .expect("finite")
            })
            .unwrap();
        let best_o = (0..nx_hat)
            .min_by(|&a, &b| {
                d_o_table[(x, a)]
                    .partial_cmp(&d_o_table[(x, b)])
                    .expect("finite")
            })
            .unwrap();
        if v == best_s * nx_hat + best_o {
            T::one()
        } else {
            T::zero()
        }
    });

    // Starting point for the polish: the best grid point, or the anchor when
    // the grid missed the feasible set.
    let mut q = match best_choice {
        Some(choice) => grid_q(&choice),
        None => anchor.clone(),
    };

    let coeff_s = DMatrix::from_fn(nx, nv, |x, v| p[x] * table_s[(x, v)]);
    let coeff_o = DMatrix::from_fn(nx, nv, |x, v| p[x] * table_o[(x, v)]);
    let info_of = |q: &DMatrix<T>| mutual_information(&p, q);

    // Exact feasibility repair: renormalize the rows and, if a budget is
    // still exceeded, blend toward the anchor (which lowers both achieved
    // distortions). Only feasible kernels are scored.
    let make_feasible = |q: &mut DMatrix<T>| {
        for x in 0..nx {
            let mut total = T::zero();
            for v in 0..nv {
                let e = q[(x, v)].max(T::zero());
                q[(x, v)] = e;
                total += e;
            }
            if total > T::zero() {
                for v in 0..nv {
                    q[(x, v)] /= total;
                }
            } else {
                for v in 0..nv {
                    q[(x, v)] = anchor[(x, v)];
                }
            }
        }
        for (coeff, budget) in [(&coeff_s, d_s), (&coeff_o, d_o)] {
            let value = q.dot(coeff);
            let violation = value - budget;
            if violation > T::zero() {
                let span = value - anchor.dot(coeff);
                if span > T::zero() {
                    let theta = (violation / span).min(T::one());
                    *q = &*q * (T::one() - theta) + &anchor * theta;
                }
            }
        }
    };

    // Polish by exponentiated-gradient mirror descent on a quadratic-penalty
    // formulation, tightening the penalty in stages. Multiplicative updates
    // match the entropy geometry of the objective, so entries can approach
    // zero without the curvature blowup that stalls Euclidean steps.
    for e in q.iter_mut() {
        *e = *e * T::of(0.99) + T::of(0.01) / T::of(nv as f64);
    }
    let floor = T::of(1e-300);
    let mut best = best_info;
    for stage in 0..4 {
        let rho = T::of(100.0) * T::of(100.0f64.powi(stage));
        let objective = |q: &DMatrix<T>| -> T {
            let vs = (q.dot(&coeff_s) - d_s).max(T::zero());
            let vo = (q.dot(&coeff_o) - d_o).max(T::zero());
            info_of(q) + rho * (vs * vs + vo * vo)
        };
        let mut f = objective(&q);
        let mut eta = T::of(0.25);
        let mut stall = 0;
        for _ in 0..800 {
            let mut r = vec![T::zero(); nv];
            for x in 0..nx {
                for v in 0..nv {
                    r[v] += p[x] * q[(x, v)];
                }
            }
            let vs = (q.dot(&coeff_s) - d_s).max(T::zero());
            let vo = (q.dot(&coeff_o) - d_o).max(T::zero());
            let grad = DMatrix::from_fn(nx, nv, |x, v| {
                p[x] * (q[(x, v)].max(floor) / r[v].max(floor)).ln()
                    + T::of(2.0) * rho * (vs * coeff_s[(x, v)] + vo * coeff_o[(x, v)])
            });
            let mut improved = false;
            for _ in 0..40 {
                let mut trial = DMatrix::zeros(nx, nv);
                for x in 0..nx {
                    let mut peak = -T::infinity();
                    for v in 0..nv {
                        let l = q[(x, v)].max(floor).ln() - eta * grad[(x, v)];
                        trial[(x, v)] = l;
                        peak = peak.max(l);
                    }
                    let mut total = T::zero();
                    for v in 0..nv {
                        let e = (trial[(x, v)] - peak).exp();
                        trial[(x, v)] = e;
                        total += e;
                    }
                    for v in 0..nv {
                        trial[(x, v)] /= total;
                    }
                }
                let ft = objective(&trial);
                if ft < f {
                    q = trial;
                    f = ft;
                    eta = (eta * T::of(1.3)).min(T::of(8.0));
                    improved = true;
                    break;
                }
                eta *= T::of(0.5);
                if eta < T::of(1e-14) {
                    break;
                }
            }
            if improved {
                stall = 0;
            } else {
                stall += 1;
                if stall > 3 {
                    break;
                }
            }
        }
        let mut repaired = q.clone();
        make_feasible(&mut repaired);
        best = best.min(info_of(&repaired));
    }

    Ok(best.max(T::zero()))
}

// ---------------------------------------------------------------------------
// Block distortion identity
// ---------------------------------------------------------------------------

/// Compares the block state distortion against its reduced form for a
/// deterministic block encoder, by exact enumeration of the i.i.d. block law.
///
/// `encoder` maps an observation block of length `n` to the pair of
/// reproduction blocks (state reproductions, observation reproductions);
/// distortion is averaged over positions. Returns
/// `(E[d_s over (S^n, Shat^n)], E[d_s_reduced over (X^n, Shat^n)])`; the two
/// agree by the tower property, which this check verifies numerically.
pub fn block_distortion_identity_check<T: Real>(
    source: &DiscreteSemanticSource<T>,
    encoder: impl Fn(&[usize]) -> (Vec<usize>, Vec<usize>),
    n: usize,
) -> Result<(T, T)> {
    if n == 0 || n > 3 {
        return Err(Error::InvalidArgument("block length must lie in 1..=3".into()));
    }
    let nx = source.n_obs();
    let ns = source.n_states();
    let total = (nx as u128).pow(n as u32) * (ns as u128).pow(n as u32);
    if total > 20_000_000 {
        return Err(Error::TooLarge("block enumeration would exceed the work cap".into()));
    }
    let p = source.obs_pmf();
    let d_s = source.state_distortion();
    let reduced = reduce_state_distortion(source).table;
    let inv_n = T::one() / T::of(n as f64);

    let mut lhs = T::zero();
    let mut rhs = T::zero();
    let mut xs = vec![0usize; n];
    'blocks: loop {
        let (shat, xhat) = encoder(&xs);
        if shat.len() != n || xhat.len() != n {
            return Err(Error::InvalidArgument(
                "encoder must return blocks of the input length".into(),
            ));
        }
        if shat.iter().any(|&s| s >= source.n_state_repr())
            || xhat.iter().any(|&v| v >= source.n_obs_repr())
        {
            return Err(Error::InvalidArgument(
                "encoder output indexes outside the reproduction alphabets".into(),
            ));
        }
        let px: T = xs.iter().map(|&x| p[x]).fold(T::one(), |a, b| a * b);
        let mut reduced_block = T::zero();
        for t in 0..n {
            reduced_block += reduced[(xs[t], shat[t])];
        }
        rhs += px * inv_n * reduced_block;

        // Full enumeration of the hidden-state block given the observations.
        let mut ss = vec![0usize; n];
        loop {
            let ps: T = (0..n)
                .map(|t| source.state_given_obs(ss[t], xs[t]))
                .fold(T::one(), |a, b| a * b);
            if ps > T::zero() {
                let mut block = T::zero();
                for t in 0..n {
                    block += d_s[(ss[t], shat[t])];
                }
                lhs += px * ps * inv_n * block;
            }
            let mut t = 0;
            loop {
                if t == n {
                    break;
                }
                ss[t] += 1;
                if ss[t] < ns {
                    break;
                }
                ss[t] = 0;
                t += 1;
            }
            if t == n {
                break;
            }
        }

        let mut t = 0;
        loop {
            if t == n {
                break 'blocks;
            }
            xs[t] += 1;
            if xs[t] < nx {
                break;
            }
            xs[t] = 0;
            t += 1;
        }
    }
    Ok((lhs, rhs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::deterministic_state_source;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hamming(n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { 1.0 })
    }

    /// Uniform binary observation whose hidden state is a BSC(flip) corruption.
    fn bsc_source(flip: f64) -> DiscreteSemanticSource<f64> {
        let joint = DMatrix::from_row_slice(
            2,
            2,
            &[
                0.5 * (1.0 - flip),
                0.5 * flip,
                0.5 * flip,
                0.5 * (1.0 - flip),
            ],
        );
        DiscreteSemanticSource::new(joint, hamming(2), hamming(2)).unwrap()
    }

    fn identity_source(obs_pmf: &[f64]) -> DiscreteSemanticSource<f64> {
        let n = obs_pmf.len();
        let map: Vec<usize> = (0..n).collect();
        deterministic_state_source(obs_pmf, &map, hamming(n), hamming(n)).unwrap()
    }

    fn binary_rate(d: f64) -> f64 {
        let hb = -d * d.ln() - (1.0 - d) * (1.0 - d).ln();
        std::f64::consts::LN_2 - hb
    }

    fn reevaluate(
        source: &DiscreteSemanticSource<f64>,
        solution: &DiscreteRdfSolution<f64>,
    ) -> (f64, f64) {
        let reduced = reduce_state_distortion(source).table;
        let d_o = source.obs_distortion();
        let nx_hat = source.n_obs_repr();
        let p = source.obs_pmf();
        let mut ds = 0.0;
        let mut dd = 0.0;
        for x in 0..source.n_obs() {
            for v in 0..solution.conditional_pmf.ncols() {
                let q = solution.conditional_pmf[(x, v)];
                ds += p[x] * q * reduced[(x, v / nx_hat)];
                dd += p[x] * q * d_o[(x, v % nx_hat)];
            }
        }
        (ds, dd)
    }

    #[test]
    fn reduction_collapses_deterministic_states_to_their_distortion_rows() {
        let source = identity_source(&[0.5, 0.5]);
        let reduced = reduce_state_distortion(&source);
        assert_eq!(reduced.table, hamming(2));
    }

    #[test]
    fn reduction_averages_rows_under_a_uniform_state_mixture() {
        // P(s | x) = 1/2 for both states regardless of x.
        let joint = DMatrix::from_row_slice(2, 2, &[0.25, 0.25, 0.25, 0.25]);
        let d_s = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.4, 0.2]);
        let source = DiscreteSemanticSource::new(joint, d_s, hamming(2)).unwrap();
        let reduced = reduce_state_distortion(&source);
        for x in 0..2 {
            assert!((reduced.table[(x, 0)] - 0.2).abs() < 1e-15);
            assert!((reduced.table[(x, 1)] - 0.6).abs() < 1e-15);
        }
    }

    #[test]
    fn reduction_of_a_flipped_state_channel_mixes_by_the_flip_probability() {
        let reduced = reduce_state_distortion(&bsc_source(0.1));
        for x in 0..2 {
            assert!((reduced.table[(x, x)] - 0.1).abs() < 1e-12);
            assert!((reduced.table[(x, 1 - x)] - 0.9).abs() < 1e-12);
        }
    }

    #[test]
    fn slack_budgets_give_zero_rate_with_a_constant_reproduction() {
        let source = bsc_source(0.1);
        let opts = DiscreteOptions::default();
        let solution = solve_discrete_rdf(&source, 2.0, 2.0, &opts).unwrap();
        assert_eq!(solution.rate, 0.0);
        assert_eq!(solution.state_multiplier(), 0.0);
        assert_eq!(solution.obs_multiplier, 0.0);
        assert!(!solution.obs_active);
        assert!(solution.converged);
        for x in 0..2 {
            let row: f64 = (0..4).map(|v| solution.conditional_pmf[(x, v)]).sum();
            assert!((row - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_budgets_on_an_identity_state_recover_the_binary_rate() {
        let source = identity_source(&[0.5, 0.5]);
        let opts = DiscreteOptions::default();
        let solution = solve_discrete_rdf(&source, 0.2, 0.2, &opts).unwrap();
        assert!(solution.converged);
        assert!(
            (solution.rate - binary_rate(0.2)).abs() < 1e-5,
            "rate {} vs analytic {}",
            solution.rate,
            binary_rate(0.2)
        );
        assert!(solution.state_distortion() <= 0.2 + 1e-7);
        assert!(solution.obs_distortion <= 0.2 + 1e-7);
    }

    #[test]
    fn rate_matches_the_exhaustive_oracle_on_a_flipped_state_source() {
        let source = bsc_source(0.1);
        let opts = DiscreteOptions::default();
        let solution = solve_discrete_rdf(&source, 0.2, 0.3, &opts).unwrap();
        let oracle = exhaustive_discrete_oracle(&source, 0.2, 0.3, 12).unwrap();
        assert!(
            (solution.rate - oracle).abs() < 1e-3,
            "solver {} vs oracle {}",
            solution.rate,
            oracle
        );
    }

    #[test]
    fn reported_distortions_match_a_direct_reevaluation_of_the_kernel() {
        let source = bsc_source(0.15);
        let opts = DiscreteOptions::default();
        let solution = solve_discrete_rdf(&source, 0.35, 0.3, &opts).unwrap();
        let (ds, dd) = reevaluate(&source, &solution);
        assert!((ds - solution.state_distortion()).abs() < 1e-12);
        assert!((dd - solution.obs_distortion).abs() < 1e-12);
        assert!(ds <= 0.35 + 1e-7);
        assert!(dd <= 0.3 + 1e-7);
    }

    #[test]
    fn a_slack_state_budget_attaches_the_state_reproduction_deterministically() {
        let source = bsc_source(0.1);
        let opts = DiscreteOptions::default();
        // State budget 0.6 is met by a constant letter (cost 0.5), so only the
        // observation constraint should be paid for.
        let solution = solve_discrete_rdf(&source, 0.6, 0.2, &opts).unwrap();
        assert_eq!(solution.state_multiplier(), 0.0);
        assert!(!solution.state_active[0]);
        assert!(solution.obs_active);
        assert!((solution.rate - binary_rate(0.2)).abs() < 1e-5);
        // Every observation row splits its mass across at most one state
        // letter per paid letter.
        for x in 0..2 {
            for xhat in 0..2 {
                let support = (0..2)
                    .filter(|&shat| solution.conditional_pmf[(x, shat * 2 + xhat)] > 0.0)
                    .count();
                assert!(support <= 1);
            }
        }
    }

    #[test]
    fn infeasible_budgets_report_the_minimal_achievable_pair() {
        let source = bsc_source(0.1);
        let opts = DiscreteOptions::default();
        match solve_discrete_rdf(&source, 0.05, 0.3, &opts) {
            Err(Error::Infeasible {
                min_achievable,
                budgets,
            }) => {
                assert!((min_achievable[0] - 0.1).abs() < 1e-12);
                assert_eq!(min_achievable[1], 0.0);
                assert_eq!(budgets, vec![0.05, 0.3]);
            }
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn single_state_solver_is_a_bit_exact_special_case_of_the_multi_solver() {
        let source = bsc_source(0.1);
        let opts = DiscreteOptions::default();
        let single = solve_discrete_rdf(&source, 0.25, 0.3, &opts).unwrap();
        let multi =
            solve_discrete_rdf_multi(std::slice::from_ref(&source), &[0.25], 0.3, &opts).unwrap();
        assert_eq!(single.rate.to_bits(), multi.rate.to_bits());
        assert_eq!(single.conditional_pmf, multi.conditional_pmf);
    }

    #[test]
    fn duplicated_states_with_equal_budgets_match_the_single_state_rate() {
        let source = bsc_source(0.1);
        let opts = DiscreteOptions::default();
        let single = solve_discrete_rdf(&source, 0.25, 0.3, &opts).unwrap();
        let multi = solve_discrete_rdf_multi(
            &[source.clone(), source.clone()],
            &[0.25, 0.25],
            0.3,
            &opts,
        )
        .unwrap();
        assert!(
            (multi.rate - single.rate).abs() < 1e-6,
            "duplicated {} vs single {}",
            multi.rate,
            single.rate
        );
    }

    #[test]
    fn two_state_solution_respects_budgets_and_dominates_the_single_state_rate() {
        // Two distinct hidden states over the same binary observation.
        let a = bsc_source(0.1);
        let b = bsc_source(0.25);
        let opts = DiscreteOptions::default();
        let solution =
            solve_discrete_rdf_multi(&[a.clone(), b], &[0.3, 0.4], 0.35, &opts).unwrap();
        assert!(solution.converged);
        assert!(solution.state_distortions[0] <= 0.3 + 1e-7);
        assert!(solution.state_distortions[1] <= 0.4 + 1e-7);
        assert!(solution.obs_distortion <= 0.35 + 1e-7);
        assert!(solution.rate >= 0.0);
        // Dropping the second state constraint can only lower the rate.
        let looser = solve_discrete_rdf(&a, 0.3, 0.35, &opts).unwrap();
        assert!(solution.rate >= looser.rate - 1e-6);
    }

    #[test]
    fn weighted_solver_with_zero_state_weight_matches_the_plain_solver() {
        let source = bsc_source(0.1);
        let opts = DiscreteOptions::default();
        let weighted = solve_discrete_weighted(&source, 0.0, 1.0, 0.3, &opts).unwrap();
        let plain = solve_discrete_rdf(&source, f64::INFINITY, 0.3, &opts).unwrap();
        assert!(
            (weighted.rate - plain.rate).abs() < 1e-6,
            "weighted {} vs plain {}",
            weighted.rate,
            plain.rate
        );
        assert_eq!(weighted.state_multiplier(), 0.0);
    }

    #[test]
    fn weighted_solver_relaxes_the_two_budget_solution() {
        let source = bsc_source(0.1);
        let opts = DiscreteOptions::default();
        let two = solve_discrete_rdf(&source, 0.2, 0.3, &opts).unwrap();
        let combined = two.state_distortion() + two.obs_distortion;
        let weighted = solve_discrete_weighted(&source, 1.0, 1.0, combined, &opts).unwrap();
        assert!(weighted.rate <= two.rate + 1e-5);
    }

    #[test]
    fn weighted_solver_rejects_degenerate_weights() {
        let source = bsc_source(0.1);
        let opts = DiscreteOptions::default();
        assert!(matches!(
            solve_discrete_weighted(&source, 0.0, 0.0, 0.5, &opts),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            solve_discrete_weighted(&source, -1.0, 1.0, 0.5, &opts),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn oracle_returns_zero_above_the_maximal_distortions() {
        let source = bsc_source(0.1);
        let oracle: f64 = exhaustive_discrete_oracle(&source, 1.5, 1.5, 8).unwrap();
        assert_eq!(oracle, 0.0);
    }

    #[test]
    fn oracle_tracks_the_analytic_binary_rate() {
        let source = identity_source(&[0.5, 0.5]);
        let oracle = exhaustive_discrete_oracle(&source, 0.2, 0.2, 14).unwrap();
        assert!(
            (oracle - binary_rate(0.2)).abs() < 2e-2,
            "oracle {} vs analytic {}",
            oracle,
            binary_rate(0.2)
        );
    }

    #[test]
    fn oracle_rejects_oversized_alphabets() {
        let source = identity_source(&[0.2; 5]);
        assert!(matches!(
            exhaustive_discrete_oracle(&source, 0.5, 0.5, 5),
            Err(Error::TooLarge(_))
        ));
    }

    #[test]
    fn inner_loop_objective_is_monotone() {
        let source = bsc_source(0.2);
        let p = source.obs_pmf().to_vec();
        let alphabet = ProductAlphabet::new(vec![2, 2]);
        let constraints = [
            BaConstraint {
                table: reduce_state_distortion(&source).table,
                budget: 0.2,
                axis: Some(0),
            },
            BaConstraint {
                table: source.obs_distortion().clone(),
                budget: 0.3,
                axis: Some(1),
            },
        ];
        let w = composite_weights(2, &alphabet, &constraints, &[1.3, 0.7]);
        let opts = DiscreteOptions::default();
        let mut r = vec![0.25; 4];
        // Track the objective by hand over explicit iterations.
        let mut prev = f64::INFINITY;
        for _ in 0..50 {
            let mut f = 0.0;
            let mut r_next = vec![0.0; 4];
            for x in 0..2 {
                let z: f64 = (0..4).map(|v| r[v] * w[(x, v)]).sum();
                f -= p[x] * z.ln();
                for v in 0..4 {
                    r_next[v] += p[x] * r[v] * w[(x, v)] / z;
                }
            }
            assert!(f <= prev + 1e-12, "objective increased: {f} > {prev}");
            prev = f;
            r = r_next;
        }
        // And the packaged routine agrees with a converged run.
        let mut warm = vec![0.25; 4];
        let (_, iters, converged) = ba_fixed(&p, &w, &mut warm, 1e-9, &opts);
        assert!(converged, "no convergence in {iters} iterations");
    }

    #[test]
    fn block_identity_holds_exactly_for_single_letters() {
        let source = bsc_source(0.1);
        let (lhs, rhs) =
            block_distortion_identity_check(&source, |xs| (xs.to_vec(), xs.to_vec()), 1).unwrap();
        assert!((lhs - rhs).abs() < 1e-15);
    }

    #[test]
    fn block_identity_holds_for_the_identity_encoder_on_pairs() {
        let source = bsc_source(0.3);
        let (lhs, rhs) =
            block_distortion_identity_check(&source, |xs| (xs.to_vec(), xs.to_vec()), 2).unwrap();
        assert!((lhs - rhs).abs() < 1e-14, "lhs {lhs} rhs {rhs}");
    }

    #[test]
    fn block_identity_holds_for_random_encoders_on_triples() {
        let source = bsc_source(0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let table: Vec<(Vec<usize>, Vec<usize>)> = (0..8)
                .map(|_| {
                    (
                        (0..3).map(|_| rng.random_range(0..2)).collect(),
                        (0..3).map(|_| rng.random_range(0..2)).collect(),
                    )
                })
                .collect();
            let encoder = |xs: &[usize]| {
                let idx = xs[0] * 4 + xs[1] * 2 + xs[2];
                table[idx].clone()
            };
            let (lhs, rhs) = block_distortion_identity_check(&source, encoder, 3).unwrap();
            assert!((lhs - rhs).abs() < 1e-13, "lhs {lhs} rhs {rhs}");
        }
    }

    #[test]
    fn block_identity_rejects_bad_encoders() {
        let source = bsc_source(0.1);
        assert!(matches!(
            block_distortion_identity_check(&source, |xs| (xs.to_vec(), xs.to_vec()), 4),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            block_distortion_identity_check(&source, |_| (vec![9], vec![0]), 1),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn rate_decreases_as_either_budget_loosens() {
        let source = bsc_source(0.1);
        let opts = DiscreteOptions::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let ds: f64 = rng.random_range(0.15..0.4);
            let dd: f64 = rng.random_range(0.1..0.4);
            let base = solve_discrete_rdf(&source, ds, dd, &opts).unwrap().rate;
            let looser_s = solve_discrete_rdf(&source, ds + 0.05, dd, &opts).unwrap().rate;
            let looser_o = solve_discrete_rdf(&source, ds, dd + 0.05, &opts).unwrap().rate;
            assert!(looser_s <= base + 1e-6);
            assert!(looser_o <= base + 1e-6);
        }
    }
}
