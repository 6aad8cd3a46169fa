//! Exact solver for weighted, gradient-shifted quantile regression.
//!
//! The problem is the linear program
//!
//! ```text
//! min_{eta, u, v}  tau * V'u + (1 - tau) * V'v - S'eta
//! s.t.             Y - X eta = u - v,   u >= 0,  v >= 0,  eta free,
//! ```
//!
//! whose objective equals `sum_i rho_tau(Y_i - X_i'eta) V_i - S'eta`. With
//! `S = 0` this is ordinary weighted quantile regression; a nonzero shift
//! arises from the cluster-level score terms of the gradient wild bootstrap.
//!
//! The solver is a specialized simplex working on interpolation bases: a
//! basic solution interpolates `p` observations exactly, so the working
//! factorization is a `p x p` LU rather than `n x n`. Pivots take long steps
//! through all residual sign changes along the leaving direction, which is
//! the standard device for exact quantile regression. Both the optimum and
//! every tie-breaking choice are deterministic, so identical inputs produce
//! identical output.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// Dual-box violation below which a basis is declared optimal.
const OPT_TOL: f64 = 1e-7;
/// Violation at which a dual value counts as exactly at its bound, marking a
/// degenerate tie (optimal face of dimension > 0).
const TIE_TOL: f64 = 1e-9;
/// Residual-slope magnitude below which a row is treated as parallel to the
/// pivot direction.
const SLOPE_TOL: f64 = 1e-11;
/// Cap on vertices visited while refining a degenerate tie.
const TIE_VERTEX_CAP: usize = 256;

/// The check function `rho_tau(u) = u (tau - 1{u <= 0})`.
pub fn rho_tau(u: f64, tau: f64) -> f64 {
    u * (tau - if u <= 0.0 { 1.0 } else { 0.0 })
}

/// Outcome of a successful solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum SolveStatus {
    Optimal,
    /// The optimal face has dimension > 0; the reported solution is the
    /// lexicographically smallest vertex found on it.
    DegenerateTie,
}

/// A weighted, shifted quantile-regression problem.
#[derive(Debug, Clone)]
pub struct QrProblem {
    pub responses: DVector<f64>,
    pub design: DMatrix<f64>,
    pub weights: DVector<f64>,
    pub tau: f64,
    pub shift: DVector<f64>,
}

impl QrProblem {
    /// Validates invariants: `n >= p >= 1`, `tau` strictly inside `(0,1)`,
    /// nonnegative weights with at least `p` strictly positive, full column
    /// rank of the design.
    pub fn new(
        responses: DVector<f64>,
        design: DMatrix<f64>,
        weights: DVector<f64>,
        tau: f64,
        shift: DVector<f64>,
    ) -> Result<Self> {
        let n = design.nrows();
        let p = design.ncols();
        if p == 0 || n < p {
            return Err(Error::InvalidConfig(format!(
                "design must satisfy n >= p >= 1, got n={n}, p={p}"
            )));
        }
        if responses.len() != n || weights.len() != n {
            return Err(Error::InvalidConfig(
                "responses/weights length must match design rows".into(),
            ));
        }
        if shift.len() != p {
            return Err(Error::InvalidConfig("shift length must match design columns".into()));
        }
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::InvalidConfig(format!("tau must lie in (0,1), got {tau}")));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::InvalidConfig("weights must be nonnegative".into()));
        }
        if weights.iter().filter(|&&w| w > 0.0).count() < p {
            return Err(Error::InvalidConfig(
                "need at least p strictly positive weights".into(),
            ));
        }
        linalg::require_full_column_rank(&design, "quantile regression design")?;
        Ok(Self {
            responses,
            design,
            weights,
            tau,
            shift,
        })
    }

    /// Solves the problem to optimality.
    pub fn solve(&self) -> Result<QrSolution> {
        let kernel = Kernel::from_problem(self);
        let sol = kernel.solver().solve(self.responses.as_slice(), self.shift.as_slice(), None)?;
        Ok(self.finish(sol))
    }

    fn finish(&self, sol: KernelSolution) -> QrSolution {
        let n = self.design.nrows();
        let eta = DVector::from_column_slice(&sol.eta);
        let fitted = &self.design * &eta;
        let mut u = DVector::zeros(n);
        let mut v = DVector::zeros(n);
        let mut objective = -self.shift.dot(&eta);
        for i in 0..n {
            let r = self.responses[i] - fitted[i];
            objective += rho_tau(r, self.tau) * self.weights[i];
            if r > 0.0 {
                u[i] = r;
            } else {
                v[i] = -r;
            }
        }
        QrSolution {
            coefficients: eta,
            objective,
            positive_part: u,
            negative_part: v,
            status: sol.status,
        }
    }
}

/// Minimizer returned by [`QrProblem::solve`].
#[derive(Debug, Clone)]
pub struct QrSolution {
    pub coefficients: DVector<f64>,
    pub objective: f64,
    pub positive_part: DVector<f64>,
    pub negative_part: DVector<f64>,
    pub status: SolveStatus,
}

/// Subgradient certificate: true iff zero lies in the subdifferential of the
/// objective at `coefficients` within `tol`, checked through one-sided
/// directional derivatives along every coordinate direction.
pub fn verify_optimality(problem: &QrProblem, solution: &QrSolution, tol: f64) -> bool {
    let n = problem.design.nrows();
    let p = problem.design.ncols();
    let tau = problem.tau;
    let fitted = &problem.design * &solution.coefficients;
    let ztol = 1e-9;
    for k in 0..p {
        for sgn in [1.0f64, -1.0] {
            // derivative of the objective along sgn * e_k
            let mut d = -sgn * problem.shift[k];
            for i in 0..n {
                let w = problem.weights[i];
                let xik = sgn * problem.design[(i, k)];
                let r = problem.responses[i] - fitted[i];
                let c_pos = tau * w;
                let c_neg = (tau - 1.0) * w;
                if r > ztol {
                    d += -c_pos * xik;
                } else if r < -ztol {
                    d += -c_neg * xik;
                } else {
                    d += (-c_pos * xik).max(-c_neg * xik);
                }
            }
            if d < -tol {
                return false;
            }
        }
    }
    true
}

/// Immutable solve context: design rows, weights, and quantile index.
///
/// Responses and shift vary across profile-grid points and bootstrap draws,
/// so they are arguments of [`KernelSolver::solve`] rather than part of the
/// kernel. The kernel is freely shareable across threads.
#[derive(Debug, Clone)]
pub struct Kernel {
    n: usize,
    p: usize,
    /// Row-major n x p design.
    rows: Vec<f64>,
    /// Column-major copy of the design; the hot per-row passes accumulate
    /// along columns so they vectorize.
    cols: Vec<f64>,
    weights: Vec<f64>,
    tau: f64,
}

impl Kernel {
    pub fn new(design: &DMatrix<f64>, weights: &[f64], tau: f64) -> Result<Self> {
        let n = design.nrows();
        let p = design.ncols();
        if p == 0 || n < p {
            return Err(Error::InvalidConfig(format!(
                "design must satisfy n >= p >= 1, got n={n}, p={p}"
            )));
        }
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::InvalidConfig(format!("tau must lie in (0,1), got {tau}")));
        }
        linalg::require_full_column_rank(design, "quantile regression design")?;
        Ok(Self::new_trusted(design, weights, tau))
    }

    /// Skips the rank check; for hot paths where the same design was already
    /// validated.
    pub(crate) fn new_trusted(design: &DMatrix<f64>, weights: &[f64], tau: f64) -> Self {
        let n = design.nrows();
        let p = design.ncols();
        let mut rows = vec![0.0; n * p];
        let mut cols = vec![0.0; n * p];
        for i in 0..n {
            for j in 0..p {
                rows[i * p + j] = design[(i, j)];
                cols[j * n + i] = design[(i, j)];
            }
        }
        Self {
            n,
            p,
            rows,
            cols,
            weights: weights.to_vec(),
            tau,
        }
    }

    fn from_problem(pb: &QrProblem) -> Self {
        Self::new_trusted(&pb.design, pb.weights.as_slice(), pb.tau)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    #[inline]
    fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.p..(i + 1) * self.p]
    }

    #[inline]
    fn col(&self, j: usize) -> &[f64] {
        &self.cols[j * self.n..(j + 1) * self.n]
    }

    /// A solver with scratch buffers bound to this kernel.
    pub fn solver(&self) -> KernelSolver<'_> {
        KernelSolver {
            kernel: self,
            resid: vec![0.0; self.n],
            side: vec![-1; self.n],
            psi_val: vec![0.0; self.n],
            lu: vec![0.0; self.p * self.p],
            perm: vec![0; self.p],
            basis: vec![0; self.p],
            eta: vec![0.0; self.p],
            dual: vec![0.0; self.p],
            dir: vec![0.0; self.p],
            breaks: Vec::with_capacity(self.n),
            in_basis: vec![false; self.n],
            rhs: vec![0.0; self.p],
            yb: vec![0.0; self.p],
            fit: vec![0.0; self.n],
            slopes: vec![0.0; self.n],
            dirty: false,
        }
    }
}

/// Result of a kernel solve: coefficients plus the interpolation basis, which
/// callers thread through profile-grid loops as a warm start.
#[derive(Debug, Clone)]
pub struct KernelSolution {
    pub eta: Vec<f64>,
    pub basis: Vec<usize>,
    pub status: SolveStatus,
}

pub struct KernelSolver<'a> {
    kernel: &'a Kernel,
    resid: Vec<f64>,
    /// Score side of each non-basis row: +1 for the positive-residual side,
    /// -1 for the nonpositive side. For rows with residual numerically zero
    /// this is genuine state assigned by pivots; elsewhere it follows the
    /// residual sign.
    side: Vec<i8>,
    psi_val: Vec<f64>,
    lu: Vec<f64>,
    perm: Vec<usize>,
    basis: Vec<usize>,
    eta: Vec<f64>,
    dual: Vec<f64>,
    dir: Vec<f64>,
    breaks: Vec<(f64, usize)>,
    in_basis: Vec<bool>,
    rhs: Vec<f64>,
    yb: Vec<f64>,
    fit: Vec<f64>,
    slopes: Vec<f64>,
    /// True while eta/residuals carry incremental pivot updates not yet
    /// recomputed exactly from the basis.
    dirty: bool,
}

impl<'a> KernelSolver<'a> {
    /// Solves `min sum_i rho_tau(y_i - x_i'eta) w_i - shift'eta`.
    ///
    /// `warm` seeds the interpolation basis (typically the basis returned by
    /// the previous solve against the same kernel); an unusable warm basis
    /// silently falls back to a cold start.
    pub fn solve(
        &mut self,
        y: &[f64],
        shift: &[f64],
        warm: Option<&[usize]>,
    ) -> Result<KernelSolution> {
        let n = self.kernel.n;
        let p = self.kernel.p;
        assert_eq!(y.len(), n, "response length");
        assert_eq!(shift.len(), p, "shift length");

        if !self.try_warm_basis(warm) {
            self.cold_basis()?;
        }
        self.refresh_state(y, true);

        let max_pivots = 40 * n + 400;
        let mut degenerate_streak = 0usize;
        let mut npiv = 0usize;
        for _ in 0..max_pivots {
            npiv += 1;
            if npiv % 32 == 0 && self.dirty {
                self.refresh_state(y, false);
            }
            self.compute_dual(shift);
            // After a long run of zero-length steps, fall back to Bland's
            // rule (smallest-index choices, single-breakpoint steps), which
            // cannot cycle.
            let bland = degenerate_streak > p + 16;
            let viol = self.most_violated(bland);
            let Some((pos, sigma)) = viol else {
                return Ok(self.finalize(y, shift));
            };
            let stepped = self.pivot(pos, sigma, bland)?;
            if stepped {
                degenerate_streak = 0;
            } else {
                degenerate_streak += 1;
            }
        }
        Err(Error::IterationLimit(max_pivots))
    }

    fn try_warm_basis(&mut self, warm: Option<&[usize]>) -> bool {
        let p = self.kernel.p;
        let Some(w) = warm else { return false };
        if w.len() != p {
            return false;
        }
        let mut seen = w.to_vec();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != p || w.iter().any(|&i| i >= self.kernel.n) {
            return false;
        }
        self.basis.copy_from_slice(w);
        self.rebuild_flags();
        self.factor_basis()
    }

    /// Greedy pivoted row selection: p linearly independent design rows.
    fn cold_basis(&mut self) -> Result<()> {
        let n = self.kernel.n;
        let p = self.kernel.p;
        // Gaussian elimination over a working copy of all rows, choosing the
        // largest remaining pivot each round.
        let mut work = self.kernel.rows.clone();
        let mut used = vec![false; n];
        for k in 0..p {
            let mut best = usize::MAX;
            let mut best_val = 0.0f64;
            for i in 0..n {
                if used[i] {
                    continue;
                }
                let v = work[i * p + k].abs();
                if v > best_val {
                    best_val = v;
                    best = i;
                }
            }
            if best == usize::MAX || best_val <= 1e-12 {
                return Err(Error::RankDeficient {
                    context: "initial basis selection".into(),
                    ratio: best_val,
                });
            }
            used[best] = true;
            self.basis[k] = best;
            let pivot = work[best * p + k];
            for i in 0..n {
                if used[i] {
                    continue;
                }
                let f = work[i * p + k] / pivot;
                if f != 0.0 {
                    for j in k..p {
                        work[i * p + j] -= f * work[best * p + j];
                    }
                }
            }
        }
        self.rebuild_flags();
        if !self.factor_basis() {
            return Err(Error::RankDeficient {
                context: "initial basis factorization".into(),
                ratio: 0.0,
            });
        }
        Ok(())
    }

    /// LU-factorizes the current basis matrix (rows of the design indexed by
    /// `basis`). Returns false if numerically singular.
    fn factor_basis(&mut self) -> bool {
        let p = self.kernel.p;
        for (k, &bi) in self.basis.iter().enumerate() {
            self.lu[k * p..(k + 1) * p].copy_from_slice(self.kernel.row(bi));
        }
        lu_factor(&mut self.lu, p, &mut self.perm)
    }

    fn rebuild_flags(&mut self) {
        self.in_basis.iter_mut().for_each(|b| *b = false);
        for &bi in &self.basis {
            self.in_basis[bi] = true;
        }
    }

    /// Recomputes eta and residuals from the current basis. With `init` the
    /// score sides are reset from the residual signs (zero counts as the
    /// nonpositive side); otherwise rows whose residual is numerically zero
    /// keep their pivot-assigned side, which is what prevents degenerate
    /// pivots from being silently undone.
    fn refresh_state(&mut self, y: &[f64], init: bool) {
        self.dirty = false;
        let p = self.kernel.p;
        let n = self.kernel.n;
        let tau = self.kernel.tau;
        for (k, &bi) in self.basis.iter().enumerate() {
            self.yb[k] = y[bi];
        }
        lu_solve(&self.lu, p, &self.perm, &self.yb, &mut self.eta);
        self.fit[..n].iter_mut().for_each(|v| *v = 0.0);
        for j in 0..p {
            let c = self.kernel.col(j);
            let e = self.eta[j];
            for i in 0..n {
                self.fit[i] += e * c[i];
            }
        }
        for i in 0..n {
            let r = y[i] - self.fit[i];
            self.resid[i] = r;
            let ztol = if init { 0.0 } else { 1e-11 * (1.0 + y[i].abs()) };
            if r > ztol {
                self.side[i] = 1;
            } else if r < -ztol || init {
                self.side[i] = -1;
            }
            // otherwise: residual numerically zero, keep assigned side
            let w = self.kernel.weights[i];
            self.psi_val[i] = if self.side[i] > 0 { tau * w } else { (tau - 1.0) * w };
        }
        for &bi in &self.basis {
            self.resid[bi] = 0.0;
            self.psi_val[bi] = 0.0;
        }
    }

    #[inline]
    fn flip_side(&mut self, i: usize) {
        self.side[i] = -self.side[i];
        let w = self.kernel.weights[i];
        self.psi_val[i] = if self.side[i] > 0 {
            self.kernel.tau * w
        } else {
            (self.kernel.tau - 1.0) * w
        };
    }

    /// Solves the dual equality for the basis rows:
    /// `X_B' d_B = -shift - sum_{i not in B} psi_i x_i`.
    fn compute_dual(&mut self, shift: &[f64]) {
        let p = self.kernel.p;
        let n = self.kernel.n;
        // psi_val is zero on basis rows, so no mask is needed here.
        for j in 0..p {
            let c = self.kernel.col(j);
            let mut acc = 0.0;
            for i in 0..n {
                acc += self.psi_val[i] * c[i];
            }
            self.rhs[j] = -shift[j] - acc;
        }
        lu_solve_transpose(&self.lu, p, &self.perm, &self.rhs, &mut self.dual);
    }

    /// Picks the basis position with the largest dual-box violation; `None`
    /// when optimal. Under `bland`, picks the violated entry with the
    /// smallest design-row index instead.
    fn most_violated(&self, bland: bool) -> Option<(usize, f64)> {
        let tau = self.kernel.tau;
        let mut best: Option<(usize, f64)> = None;
        let mut best_viol = OPT_TOL;
        let mut best_row = usize::MAX;
        for (k, &bi) in self.basis.iter().enumerate() {
            let w = self.kernel.weights[bi];
            let lo = (tau - 1.0) * w;
            let hi = tau * w;
            let d = self.dual[k];
            let tol = OPT_TOL * (1.0 + w);
            let (viol, sigma) = if d < lo - tol {
                (lo - d, 1.0)
            } else if d > hi + tol {
                (d - hi, -1.0)
            } else {
                continue;
            };
            if bland {
                if bi < best_row {
                    best_row = bi;
                    best = Some((k, sigma));
                }
            } else if viol > best_viol {
                best_viol = viol;
                best = Some((k, sigma));
            }
        }
        best
    }

    /// One long-step pivot: row `basis[pos]` leaves in direction `sigma`,
    /// walking through residual sign changes until the directional
    /// derivative turns nonnegative. Under `single_step` the walk stops at
    /// the very first breakpoint (Bland mode). Returns whether the step
    /// length was strictly positive. Errors with `Unbounded` if no
    /// breakpoint stops the descent.
    fn pivot(&mut self, pos: usize, sigma: f64, single_step: bool) -> Result<bool> {
        let p = self.kernel.p;
        let n = self.kernel.n;
        let tau = self.kernel.tau;
        let b_row = self.basis[pos];
        let wb = self.kernel.weights[b_row];

        // Direction delta solves X_B delta = sigma * e_pos.
        self.yb.iter_mut().for_each(|v| *v = 0.0);
        self.yb[pos] = sigma;
        lu_solve(&self.lu, p, &self.perm, &self.yb, &mut self.dir);

        // Directional derivative at the start of the walk.
        let mut d = sigma * self.dual[pos] + if sigma > 0.0 { (1.0 - tau) * wb } else { tau * wb };

        // Collect breakpoints: t >= 0 where a non-basis residual crosses zero
        // against its currently assigned side.
        self.breaks.clear();
        self.slopes[..n].iter_mut().for_each(|v| *v = 0.0);
        for j in 0..p {
            let c = self.kernel.col(j);
            let dj = self.dir[j];
            for i in 0..n {
                self.slopes[i] += dj * c[i];
            }
        }
        for i in 0..n {
            if self.in_basis[i] {
                continue;
            }
            let slope = self.slopes[i];
            if slope.abs() <= SLOPE_TOL {
                continue;
            }
            // A +1 side row moves toward zero when its residual decreases
            // (slope > 0); a -1 side row when it increases (slope < 0).
            let crossing = if self.side[i] > 0 { slope > 0.0 } else { slope < 0.0 };
            if crossing {
                let t = (self.resid[i] / slope).max(0.0);
                self.breaks.push((t, i));
            }
        }
        self.breaks
            .sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));

        let mut entering = None;
        for (k, &(t, i)) in self.breaks.iter().enumerate() {
            d += self.kernel.weights[i] * self.slopes[i].abs();
            if single_step || d >= 0.0 {
                entering = Some((k, t, i));
                break;
            }
        }
        let Some((e_idx, t, e_row)) = entering else {
            return Err(Error::Unbounded);
        };

        // Rows the walk crossed before the entering one flip sides; the
        // leaving row takes the side it moved toward. These assignments are
        // the state `refresh_state` preserves for zero residuals.
        let crossed: Vec<usize> = self.breaks[..e_idx].iter().map(|&(_, i)| i).collect();
        for i in crossed {
            self.flip_side(i);
        }
        self.side[b_row] = if sigma > 0.0 { -1 } else { 1 };
        let wb2 = self.kernel.weights[b_row];
        self.psi_val[b_row] = if sigma > 0.0 { (self.kernel.tau - 1.0) * wb2 } else { self.kernel.tau * wb2 };

        self.basis[pos] = e_row;
        if !self.factor_basis() {
            // Restore and report; with exact pivots this cannot happen, so a
            // failure here means the instance is numerically hopeless.
            self.basis[pos] = b_row;
            self.factor_basis();
            return Err(Error::RankDeficient {
                context: "basis update".into(),
                ratio: 0.0,
            });
        }
        self.in_basis[b_row] = false;
        self.in_basis[e_row] = true;
        self.psi_val[e_row] = 0.0;

        if t > 0.0 {
            // Walk the state along the direction; exact recomputation happens
            // at finalize and on the periodic hygiene refresh.
            self.dirty = true;
            let n = self.kernel.n;
            for j in 0..p {
                self.eta[j] += t * self.dir[j];
            }
            for i in 0..n {
                if !self.in_basis[i] {
                    self.resid[i] -= t * self.slopes[i];
                }
            }
            for &bi in &self.basis {
                self.resid[bi] = 0.0;
            }
            self.resid[b_row] = -t * sigma;
            Ok(true)
        } else {
            self.resid[e_row] = 0.0;
            self.resid[b_row] = 0.0;
            Ok(false)
        }
    }

    fn finalize(&mut self, y: &[f64], shift: &[f64]) -> KernelSolution {
        if self.dirty {
            self.refresh_state(y, false);
        }
        let tau = self.kernel.tau;
        let mut tie = false;
        for (k, &bi) in self.basis.iter().enumerate() {
            let w = self.kernel.weights[bi];
            let lo = (tau - 1.0) * w;
            let hi = tau * w;
            let tol = TIE_TOL * (1.0 + w);
            if (self.dual[k] - lo).abs() <= tol || (self.dual[k] - hi).abs() <= tol {
                tie = true;
                break;
            }
        }
        if !tie {
            return KernelSolution {
                eta: self.eta.clone(),
                basis: self.basis.clone(),
                status: SolveStatus::Optimal,
            };
        }
        self.refine_tie(y, shift)
    }

    /// Walks the optimal face through zero-cost pivots, returning the
    /// lexicographically smallest vertex visited. The face of a quantile
    /// regression is low-dimensional, so a capped breadth-first walk covers
    /// it in practice.
    fn refine_tie(&mut self, y: &[f64], shift: &[f64]) -> KernelSolution {
        let p = self.kernel.p;
        let tau = self.kernel.tau;

        let mut best_eta = self.eta.clone();
        let mut best_basis = self.basis.clone();
        let mut seen = std::collections::BTreeSet::new();
        let mut key = self.basis.clone();
        key.sort_unstable();
        seen.insert(key);
        let mut queue = vec![self.basis.clone()];

        while let Some(basis) = queue.pop() {
            if seen.len() > TIE_VERTEX_CAP {
                break;
            }
            self.basis.copy_from_slice(&basis);
            self.rebuild_flags();
            if !self.factor_basis() {
                continue;
            }
            self.refresh_state(y, false);
            self.compute_dual(shift);
            if lex_less(&self.eta, &best_eta) {
                best_eta = self.eta.clone();
                best_basis = self.basis.clone();
            }
            for pos in 0..p {
                let bi = self.basis[pos];
                let w = self.kernel.weights[bi];
                let lo = (tau - 1.0) * w;
                let hi = tau * w;
                let tol = TIE_TOL * (1.0 + w);
                for (bound, sigma) in [(lo, 1.0f64), (hi, -1.0f64)] {
                    if (self.dual[pos] - bound).abs() > tol {
                        continue;
                    }
                    if let Some(next) = self.zero_cost_neighbor(pos, sigma) {
                        let mut k = next.clone();
                        k.sort_unstable();
                        if seen.insert(k) {
                            queue.push(next);
                        }
                    }
                    // compute_dual state is untouched by the probe
                }
            }
        }

        self.basis.copy_from_slice(&best_basis);
        self.rebuild_flags();
        self.factor_basis();
        self.refresh_state(y, false);
        KernelSolution {
            eta: best_eta,
            basis: best_basis,
            status: SolveStatus::DegenerateTie,
        }
    }

    /// The basis across the zero-cost edge leaving `basis[pos]` in direction
    /// `sigma`, if the edge ends at another vertex.
    fn zero_cost_neighbor(&mut self, pos: usize, sigma: f64) -> Option<Vec<usize>> {
        let p = self.kernel.p;
        let n = self.kernel.n;
        let mut e = vec![0.0; p];
        e[pos] = sigma;
        let mut dir = vec![0.0; p];
        lu_solve(&self.lu, p, &self.perm, &e, &mut dir);

        let mut first: Option<(f64, usize)> = None;
        for i in 0..n {
            if self.in_basis[i] {
                continue;
            }
            let xi = self.kernel.row(i);
            let mut slope = 0.0;
            for j in 0..p {
                slope += xi[j] * dir[j];
            }
            if slope.abs() <= SLOPE_TOL {
                continue;
            }
            let crossing = if self.side[i] > 0 { slope > 0.0 } else { slope < 0.0 };
            if !crossing {
                continue;
            }
            let t = (self.resid[i] / slope).max(0.0);
            match first {
                Some((tb, ib)) if (t, i) >= (tb, ib) => {}
                _ => first = Some((t, i)),
            }
        }
        let (_, enter) = first?;
        let mut next = self.basis.clone();
        next[pos] = enter;
        Some(next)
    }
}

fn lex_less(a: &[f64], b: &[f64]) -> bool {
    for (x, y) in a.iter().zip(b.iter()) {
        if x < y {
            return true;
        }
        if x > y {
            return false;
        }
    }
    false
}

/// In-place LU with partial pivoting for small row-major matrices.
/// `perm[k]` is the original row index now in position k. Returns false when
/// a pivot underflows.
fn lu_factor(a: &mut [f64], p: usize, perm: &mut [usize]) -> bool {
    for (k, pk) in perm.iter_mut().enumerate() {
        *pk = k;
    }
    for k in 0..p {
        let mut piv = k;
        let mut piv_val = a[perm[k] * p + k].abs();
        for r in (k + 1)..p {
            let v = a[perm[r] * p + k].abs();
            if v > piv_val {
                piv_val = v;
                piv = r;
            }
        }
        if piv_val <= 1e-13 {
            return false;
        }
        perm.swap(k, piv);
        let pk = perm[k];
        let pivot = a[pk * p + k];
        for r in (k + 1)..p {
            let pr = perm[r];
            let f = a[pr * p + k] / pivot;
            a[pr * p + k] = f;
            if f != 0.0 {
                for j in (k + 1)..p {
                    a[pr * p + j] -= f * a[pk * p + j];
                }
            }
        }
    }
    true
}

/// Solves `A x = b` given the factorization from [`lu_factor`].
fn lu_solve(a: &[f64], p: usize, perm: &[usize], b: &[f64], x: &mut [f64]) {
    // forward: L z = P b (unit diagonal)
    for k in 0..p {
        let mut s = b[perm[k]];
        for j in 0..k {
            s -= a[perm[k] * p + j] * x[j];
        }
        x[k] = s;
    }
    // backward: U x = z
    for k in (0..p).rev() {
        let mut s = x[k];
        for j in (k + 1)..p {
            s -= a[perm[k] * p + j] * x[j];
        }
        x[k] = s / a[perm[k] * p + k];
    }
}

/// Solves `A' x = b` given the factorization from [`lu_factor`].
fn lu_solve_transpose(a: &[f64], p: usize, perm: &[usize], b: &[f64], x: &mut [f64]) {
    let mut z = vec![0.0; p];
    // forward: U' z = b (U' is lower triangular with U's diagonal)
    for k in 0..p {
        let mut s = b[k];
        for j in 0..k {
            s -= a[perm[j] * p + k] * z[j];
        }
        z[k] = s / a[perm[k] * p + k];
    }
    // backward: L' w = z (unit diagonal)
    for k in (0..p).rev() {
        let mut s = z[k];
        for j in (k + 1)..p {
            s -= a[perm[j] * p + k] * z[j];
        }
        z[k] = s;
    }
    // x = P' w
    for k in 0..p {
        x[perm[k]] = z[k];
    }
}
