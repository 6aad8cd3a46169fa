//! Profiled IVQR estimation: an inner weighted quantile regression in the
//! controls and the instrument for every candidate value of the endogenous
//! coefficient, and an outer one-dimensional grid search minimizing the
//! weighted norm of the instrument coefficient.

use nalgebra::{DMatrix, DVector};

use crate::dataset::ClusteredDataset;
use crate::error::{Error, Result, Warning};
use crate::instruments::{self, InstrumentRecipe, InstrumentSet};
use crate::qr_solver::{Kernel, KernelSolution, KernelSolver};

/// The compact search set for the endogenous coefficient.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ProfileGrid {
    pub lower: f64,
    pub upper: f64,
    pub step: f64,
    #[serde(skip)]
    points: Vec<f64>,
}

impl ProfileGrid {
    /// `lower == upper` yields a single-point grid, which downstream code
    /// flags but accepts.
    pub fn new(lower: f64, upper: f64, step: f64) -> Result<Self> {
        if !lower.is_finite() || !upper.is_finite() || lower > upper {
            return Err(Error::InvalidConfig(format!(
                "profile grid requires lower <= upper, got [{lower}, {upper}]"
            )));
        }
        if !(step > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "profile grid step must be positive, got {step}"
            )));
        }
        let mut points = Vec::new();
        let mut k = 0u64;
        loop {
            let b = lower + k as f64 * step;
            if b > upper + 1e-9 * step {
                break;
            }
            points.push(b);
            k += 1;
            if k > 50_000_000 {
                return Err(Error::InvalidConfig("profile grid has too many points".into()));
            }
        }
        Ok(Self {
            lower,
            upper,
            step,
            points,
        })
    }

    /// The paper's default search set.
    pub fn default_search() -> Self {
        Self::new(-3.0, 1.0, 0.01).expect("static grid")
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Weighting matrix for the profile norm.
#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub enum A1Choice {
    #[default]
    Identity,
    /// `P_n phi phi' v`, the instrument second moment.
    MomentPhiPhi,
    Fixed(Vec<Vec<f64>>),
}

impl A1Choice {
    pub(crate) fn matrix(&self, td: &TauDesign, ds: &ClusteredDataset) -> Result<DMatrix<f64>> {
        let d = td.d_phi;
        match self {
            A1Choice::Identity => Ok(DMatrix::identity(d, d)),
            A1Choice::MomentPhiPhi => Ok(td.phi_moment(ds)),
            A1Choice::Fixed(rows) => {
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    return Err(Error::InvalidConfig("A1 dimension mismatch".into()));
                }
                Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
            }
        }
    }
}

/// Design `[W, phi(tau)]` with its solve kernel for one quantile index.
#[derive(Debug)]
pub struct TauDesign {
    pub tau: f64,
    pub design: DMatrix<f64>,
    pub kernel: Kernel,
    pub d_w: usize,
    pub d_phi: usize,
}

impl TauDesign {
    pub fn new(ds: &ClusteredDataset, inst: &InstrumentSet, t: usize) -> Result<Self> {
        let n = ds.n();
        let dw = ds.d_w();
        let phi = inst.phi(t);
        let dphi = phi.ncols();
        let mut design = DMatrix::zeros(n, dw + dphi);
        design.view_mut((0, 0), (n, dw)).copy_from(&ds.w);
        design.view_mut((0, dw), (n, dphi)).copy_from(phi);
        let kernel = Kernel::new(&design, ds.v.as_slice(), inst.taus[t])?;
        Ok(Self {
            tau: inst.taus[t],
            design,
            kernel,
            d_w: dw,
            d_phi: dphi,
        })
    }

    /// `P_n phi phi' v`.
    pub fn phi_moment(&self, ds: &ClusteredDataset) -> DMatrix<f64> {
        let n = ds.n();
        let d = self.d_phi;
        let mut m = DMatrix::zeros(d, d);
        for i in 0..n {
            let v = ds.v[i];
            for a in 0..d {
                let pa = self.design[(i, self.d_w + a)];
                for b in 0..d {
                    m[(a, b)] += v * pa * self.design[(i, self.d_w + b)];
                }
            }
        }
        m / n as f64
    }

    /// Splits stacked coefficients into `(gamma, theta)`.
    pub fn split(&self, eta: &[f64]) -> (DVector<f64>, DVector<f64>) {
        (
            DVector::from_column_slice(&eta[..self.d_w]),
            DVector::from_column_slice(&eta[self.d_w..]),
        )
    }

    /// Responses `y - b x` into `buf`.
    pub fn response_into(&self, ds: &ClusteredDataset, b: f64, buf: &mut Vec<f64>) {
        let n = ds.n();
        buf.clear();
        buf.extend((0..n).map(|i| ds.y[i] - b * ds.x[i]));
    }
}

/// Inner fit at a fixed candidate `b`: weighted quantile regression of
/// `y - b x` on `[W, phi(tau)]`, no gradient shift.
pub fn profile_fit(
    ds: &ClusteredDataset,
    inst: &InstrumentSet,
    b: f64,
    tau: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let t = inst
        .tau_index(tau)
        .ok_or_else(|| Error::InvalidConfig(format!("instruments not built for tau={tau}")))?;
    let td = TauDesign::new(ds, inst, t)?;
    let mut solver = td.kernel.solver();
    let mut y = Vec::new();
    td.response_into(ds, b, &mut y);
    let shift = vec![0.0; td.d_w + td.d_phi];
    let sol = solver.solve(&y, &shift, None)?;
    Ok(td.split(&sol.eta))
}

/// Result of one grid sweep.
#[derive(Debug, Clone)]
pub struct GridSearch {
    pub beta: f64,
    pub gamma: DVector<f64>,
    pub theta: DVector<f64>,
    /// `(b, ||theta(b)||_{A1})` for every grid point, in grid order.
    pub profile_norms: Vec<(f64, f64)>,
    pub boundary_hit: bool,
    /// Basis at the first grid point, usable to warm-start another sweep.
    pub start_basis: Vec<usize>,
}

/// Sweeps the grid, solving the inner problem at every point (warm-started
/// along the grid) and returning the profile argmin. Ties on the norm break
/// toward the point closest to the grid midpoint, then toward the lower
/// value. The same routine serves the estimator (`shift = 0`) and the
/// bootstrap draws (`shift = S(g)`).
pub fn grid_search(
    td: &TauDesign,
    ds: &ClusteredDataset,
    solver: &mut KernelSolver<'_>,
    grid: &ProfileGrid,
    a1: &DMatrix<f64>,
    shift: &[f64],
    start: Option<&[usize]>,
    responses: Option<&[Vec<f64>]>,
) -> Result<GridSearch> {
    let mid = grid.midpoint();
    let mut best: Option<(f64, f64, usize, KernelSolution)> = None;
    let mut norms = Vec::with_capacity(grid.len());
    let mut warm: Option<Vec<usize>> = start.map(|s| s.to_vec());
    let mut start_basis = Vec::new();
    let mut ybuf = Vec::new();

    for (k, &b) in grid.points().iter().enumerate() {
        let y: &[f64] = match responses {
            Some(cache) => &cache[k],
            None => {
                td.response_into(ds, b, &mut ybuf);
                &ybuf
            }
        };
        let sol = solver.solve(y, shift, warm.as_deref())?;
        if k == 0 {
            start_basis = sol.basis.clone();
        }
        let (_, theta) = td.split(&sol.eta);
        let norm = crate::linalg::weighted_norm(&theta, a1);
        norms.push((b, norm));
        let better = match &best {
            None => true,
            Some((bn, bdist, _, _)) => {
                norm < *bn
                    || (norm == *bn
                        && ((b - mid).abs() < *bdist
                            || ((b - mid).abs() == *bdist && false)))
            }
        };
        if better {
            best = Some(((norm), (b - mid).abs(), k, sol.clone()));
        }
        warm = Some(sol.basis);
    }

    let (_, _, k_best, sol) = best.ok_or_else(|| Error::InvalidConfig("empty grid".into()))?;
    let (gamma, theta) = td.split(&sol.eta);
    let beta = grid.points()[k_best];
    let boundary_hit = grid.len() > 1 && (k_best == 0 || k_best == grid.len() - 1);
    Ok(GridSearch {
        beta,
        gamma,
        theta,
        profile_norms: norms,
        boundary_hit,
        start_basis,
    })
}

/// Per-quantile estimate.
#[derive(Debug, Clone)]
pub struct TauFit {
    pub tau: f64,
    pub beta: f64,
    pub gamma: DVector<f64>,
    pub theta: DVector<f64>,
    pub profile_norms: Vec<(f64, f64)>,
    pub boundary_hit: bool,
}

/// The profiled estimator across all quantile indices of the instrument set.
#[derive(Debug, Clone)]
pub struct IvqrFit {
    pub fits: Vec<TauFit>,
    pub a1: A1Choice,
    pub warnings: Vec<Warning>,
}

impl IvqrFit {
    pub fn for_tau(&self, tau: f64) -> Option<&TauFit> {
        self.fits.iter().find(|f| f.tau == tau)
    }
}

/// Estimates `beta(tau)` for every quantile index the instruments carry.
pub fn estimate(
    ds: &ClusteredDataset,
    inst: &InstrumentSet,
    grid: &ProfileGrid,
    a1: &A1Choice,
) -> Result<IvqrFit> {
    let mut warnings = Vec::new();
    if grid.len() == 1 {
        warnings.push(Warning::GridDegenerate);
    }
    let mut fits = Vec::with_capacity(inst.taus.len());
    for t in 0..inst.taus.len() {
        let td = TauDesign::new(ds, inst, t)?;
        let a1m = a1.matrix(&td, ds)?;
        let shift = vec![0.0; td.d_w + td.d_phi];
        let mut solver = td.kernel.solver();
        let gs = grid_search(&td, ds, &mut solver, grid, &a1m, &shift, None, None)?;
        fits.push(TauFit {
            tau: td.tau,
            beta: gs.beta,
            gamma: gs.gamma,
            theta: gs.theta,
            profile_norms: gs.profile_norms,
            boundary_hit: gs.boundary_hit,
        });
    }
    Ok(IvqrFit {
        fits,
        a1: a1.clone(),
        warnings,
    })
}

/// Estimation without a hypothesized null: a preliminary pass instruments
/// with the first-stage fitted value itself, and its estimate seeds the
/// residuals of the final instrument construction.
pub fn fit_with_preliminary(
    ds: &ClusteredDataset,
    recipe: &InstrumentRecipe,
    taus: &[f64],
    grid: &ProfileGrid,
    a1: &A1Choice,
) -> Result<(InstrumentSet, IvqrFit)> {
    use crate::instruments::InstrumentMethod;
    if recipe.method == InstrumentMethod::Parametric {
        let inst = instruments::build(ds, recipe, taus, &vec![0.0; taus.len()])?;
        let fit = estimate(ds, &inst, grid, a1)?;
        return Ok((inst, fit));
    }
    let fs = instruments::first_stage(ds)?;
    let n = ds.n();
    let prelim = InstrumentSet {
        values: taus
            .iter()
            .map(|_| DMatrix::from_column_slice(n, 1, fs.zhat.as_slice()))
            .collect(),
        zhat: fs.zhat.clone(),
        recipe: recipe.clone(),
        taus: taus.to_vec(),
        warnings: Vec::new(),
    };
    let pre_fit = estimate(ds, &prelim, grid, a1)?;
    let beta0: Vec<f64> = pre_fit.fits.iter().map(|f| f.beta).collect();
    let inst = instruments::build(ds, recipe, taus, &beta0)?;
    let fit = estimate(ds, &inst, grid, a1)?;
    Ok((inst, fit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instruments::InstrumentMethod;
    use approx::assert_relative_eq;

    /// Deterministic dataset where y depends on x with coefficient `b0` and
    /// the instrument has real strength.
    fn synthetic(n: usize, b0: f64, seed: u64) -> ClusteredDataset {
        let mut s = seed;
        let mut next = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let mut y = Vec::new();
        let mut x = Vec::new();
        let mut z = Vec::new();
        let mut wcol = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let wv = next();
            let zv = next();
            let xv = 0.9 * zv + 0.3 * next();
            let yv = b0 * xv + 0.4 * wv + 0.6 * next();
            wcol.push(wv);
            z.push(zv);
            x.push(xv);
            y.push(yv);
            labels.push((i % 4) as i64);
        }
        let w = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { wcol[i] });
        ClusteredDataset::new(y, x, w, DMatrix::from_column_slice(n, 1, &z), &labels, None).unwrap()
    }

    fn parametric_set(ds: &ClusteredDataset, taus: &[f64]) -> InstrumentSet {
        instruments::build_parametric(
            ds,
            &InstrumentRecipe::new(InstrumentMethod::Parametric),
            taus,
        )
        .unwrap()
    }

    #[test]
    fn grid_points_are_inclusive_and_evenly_spaced() {
        let g = ProfileGrid::new(-1.0, 1.0, 0.5).unwrap();
        assert_eq!(g.points(), &[-1.0, -0.5, 0.0, 0.5, 1.0]);
        let g2 = ProfileGrid::new(0.3, 0.3, 0.1).unwrap();
        assert_eq!(g2.points(), &[0.3]);
        assert!(ProfileGrid::new(1.0, -1.0, 0.1).is_err());
        assert!(ProfileGrid::new(0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn single_point_grid_returns_that_point_and_flags() {
        let ds = synthetic(60, 1.0, 3);
        let inst = parametric_set(&ds, &[0.5]);
        let grid = ProfileGrid::new(0.7, 0.7, 0.1).unwrap();
        let fit = estimate(&ds, &inst, &grid, &A1Choice::Identity).unwrap();
        assert_eq!(fit.fits[0].beta, 0.7);
        assert!(fit.warnings.contains(&Warning::GridDegenerate));
    }

    #[test]
    fn argmin_matches_exhaustive_profile_evaluation() {
        let ds = synthetic(40, 0.8, 11);
        let inst = parametric_set(&ds, &[0.5]);
        let grid = ProfileGrid::new(0.0, 2.0, 0.5).unwrap();
        let fit = estimate(&ds, &inst, &grid, &A1Choice::Identity).unwrap();

        // oracle: evaluate the five profile fits independently
        let mut best = (f64::INFINITY, f64::NAN);
        for &b in grid.points() {
            let (_, theta) = profile_fit(&ds, &inst, b, 0.5).unwrap();
            let norm = theta.norm();
            if norm < best.0 {
                best = (norm, b);
            }
        }
        assert_eq!(fit.fits[0].beta, best.1);
        let reported_min = fit.fits[0]
            .profile_norms
            .iter()
            .map(|&(_, n)| n)
            .fold(f64::INFINITY, f64::min);
        let at_beta = fit.fits[0]
            .profile_norms
            .iter()
            .find(|&&(b, _)| b == fit.fits[0].beta)
            .unwrap()
            .1;
        assert_relative_eq!(reported_min, at_beta, epsilon = 0.0);
    }

    #[test]
    fn estimator_recovers_true_coefficient() {
        let ds = synthetic(2000, 1.5, 7);
        let inst = parametric_set(&ds, &[0.5]);
        let grid = ProfileGrid::new(0.5, 2.5, 0.05).unwrap();
        let fit = estimate(&ds, &inst, &grid, &A1Choice::Identity).unwrap();
        let f = &fit.fits[0];
        assert!((f.beta - 1.5).abs() < 0.15, "beta = {}", f.beta);
        // theta at the winner is near zero, gamma near the truth
        assert!(f.theta.norm() < 0.05);
        assert!((f.gamma[1] - 0.4).abs() < 0.1);
    }

    #[test]
    fn profile_fit_rejects_zero_instrument_column() {
        let ds = synthetic(30, 1.0, 5);
        let mut inst = parametric_set(&ds, &[0.5]);
        inst.values[0] = DMatrix::zeros(30, 1);
        assert!(matches!(
            profile_fit(&ds, &inst, 1.0, 0.5),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn scaling_a1_leaves_argmin_unchanged() {
        let ds = synthetic(50, 1.2, 13);
        let inst = parametric_set(&ds, &[0.25]);
        let grid = ProfileGrid::new(0.0, 2.4, 0.1).unwrap();
        let f1 = estimate(&ds, &inst, &grid, &A1Choice::Identity).unwrap();
        let f2 = estimate(
            &ds,
            &inst,
            &grid,
            &A1Choice::Fixed(vec![vec![7.5]]),
        )
        .unwrap();
        assert_eq!(f1.fits[0].beta, f2.fits[0].beta);
    }

    #[test]
    fn halving_the_step_never_raises_the_minimum_norm() {
        let ds = synthetic(45, 0.6, 19);
        let inst = parametric_set(&ds, &[0.5]);
        let coarse = ProfileGrid::new(-0.4, 1.6, 0.2).unwrap();
        let fine = ProfileGrid::new(-0.4, 1.6, 0.1).unwrap();
        let fc = estimate(&ds, &inst, &coarse, &A1Choice::Identity).unwrap();
        let ff = estimate(&ds, &inst, &fine, &A1Choice::Identity).unwrap();
        let min_c = fc.fits[0].profile_norms.iter().map(|&(_, n)| n).fold(f64::INFINITY, f64::min);
        let min_f = ff.fits[0].profile_norms.iter().map(|&(_, n)| n).fold(f64::INFINITY, f64::min);
        assert!(min_f <= min_c + 1e-12);
    }

    #[test]
    fn preliminary_estimation_mode_runs() {
        let ds = synthetic(300, 1.0, 23);
        let recipe = InstrumentRecipe::new(InstrumentMethod::NonparametricFull);
        let grid = ProfileGrid::new(0.0, 2.0, 0.05).unwrap();
        let (inst, fit) = fit_with_preliminary(&ds, &recipe, &[0.5], &grid, &A1Choice::Identity).unwrap();
        assert_eq!(inst.taus, vec![0.5]);
        assert!((fit.fits[0].beta - 1.0).abs() < 0.3);
    }
}
