//! Instrument construction.
//!
//! All three recipes produce a scalar instrument `phi` that is orthogonal to
//! the controls in the quantile-regression sense, which is what makes the
//! cluster-level sign changes of the bootstrap valid:
//!
//! * parametric: `phi = lambda' (Z - pi' W)`, the first-stage-weighted
//!   residual of `Z` on `W`;
//! * nonparametric (full sample): `phi(tau) = zhat - chi(tau)' W`, where
//!   `chi` solves the kernel-smoothed moment equation built from the
//!   null-restricted residuals;
//! * nonparametric (cluster level): the same with per-cluster moments and
//!   bandwidths, tolerating singular per-cluster Gram matrices through the
//!   generalized inverse.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::dataset::ClusteredDataset;
use crate::error::{Error, Result, Warning};
use crate::linalg;
use crate::qr_solver;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum InstrumentMethod {
    /// `phi = lambda'(Z - G(W, pi))` with a linear link; no tuning parameters.
    Parametric,
    /// Kernel-smoothed projection estimated on the full sample.
    NonparametricFull,
    /// Kernel-smoothed projection estimated cluster by cluster.
    NonparametricCluster,
}

impl InstrumentMethod {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "parametric" => Ok(Self::Parametric),
            "np-full" => Ok(Self::NonparametricFull),
            "np-cluster" => Ok(Self::NonparametricCluster),
            other => Err(Error::InvalidConfig(format!(
                "unknown instrument method `{other}` (expected parametric | np-full | np-cluster)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Parametric => "parametric",
            Self::NonparametricFull => "np-full",
            Self::NonparametricCluster => "np-cluster",
        }
    }
}

/// Smoothing kernel for the moment matrices. Only the uniform kernel
/// `K(u) = 1{|u| <= 1}/2` is implemented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum SmoothingKernel {
    #[default]
    Uniform,
}

/// Link `G(W, pi)` of the parametric recipe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum Link {
    #[default]
    Linear,
}

/// Bandwidth overrides; `None` selects the rule-of-thumb value. The
/// cluster-level overrides apply to every cluster.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BandwidthOverrides {
    pub h1: Option<f64>,
    pub h2: Option<f64>,
    pub h3: Option<f64>,
    pub h4: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct InstrumentRecipe {
    pub method: InstrumentMethod,
    pub kernel: SmoothingKernel,
    pub link: Link,
    pub bandwidths: BandwidthOverrides,
}

impl InstrumentRecipe {
    pub fn new(method: InstrumentMethod) -> Self {
        Self {
            method,
            kernel: SmoothingKernel::Uniform,
            link: Link::Linear,
            bandwidths: BandwidthOverrides::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, h) in [
            ("h1", self.bandwidths.h1),
            ("h2", self.bandwidths.h2),
            ("h3", self.bandwidths.h3),
            ("h4", self.bandwidths.h4),
        ] {
            if let Some(v) = h {
                if !(v > 0.0) {
                    return Err(Error::InvalidConfig(format!(
                        "bandwidth {name} must be strictly positive, got {v}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Constructed instruments: one `n x d_phi` matrix per quantile index.
#[derive(Debug, Clone)]
pub struct InstrumentSet {
    pub values: Vec<DMatrix<f64>>,
    pub zhat: DVector<f64>,
    pub recipe: InstrumentRecipe,
    pub taus: Vec<f64>,
    pub warnings: Vec<Warning>,
}

impl InstrumentSet {
    pub fn d_phi(&self) -> usize {
        self.values.first().map_or(0, |m| m.ncols())
    }

    /// Instrument values at the `t`-th quantile index.
    pub fn phi(&self, t: usize) -> &DMatrix<f64> {
        &self.values[t]
    }

    pub fn tau_index(&self, tau: f64) -> Option<usize> {
        self.taus.iter().position(|&t| t == tau)
    }

    fn check_finite(&self) -> Result<()> {
        for m in &self.values {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::SingularMoment {
                    context: "instrument values are non-finite".into(),
                });
            }
        }
        Ok(())
    }
}

/// First-stage regression of the endogenous variable on `(Z, W)`.
#[derive(Debug, Clone)]
pub struct FirstStage {
    /// Coefficients ordered as the Z block followed by the W block.
    pub lambda: DVector<f64>,
    /// Fitted values `(Z', W') lambda`.
    pub zhat: DVector<f64>,
}

/// OLS of `X` on `(Z, W)` over the full sample.
pub fn first_stage(ds: &ClusteredDataset) -> Result<FirstStage> {
    let n = ds.n();
    let dz = ds.d_z();
    let dw = ds.d_w();
    let mut zw = DMatrix::zeros(n, dz + dw);
    zw.view_mut((0, 0), (n, dz)).copy_from(&ds.z);
    zw.view_mut((0, dz), (n, dw)).copy_from(&ds.w);
    let lambda = linalg::ols(&zw, &ds.x, "first stage of X on (Z, W)")?;
    let zhat = &zw * &lambda;
    Ok(FirstStage { lambda, zhat })
}

/// Builds instruments for the given quantile indices. `beta0` supplies the
/// null value per quantile index used to form the restricted residual of the
/// nonparametric recipes; the parametric recipe ignores it.
pub fn build(
    ds: &ClusteredDataset,
    recipe: &InstrumentRecipe,
    taus: &[f64],
    beta0: &[f64],
) -> Result<InstrumentSet> {
    recipe.validate()?;
    if taus.is_empty() {
        return Err(Error::InvalidConfig("at least one quantile index required".into()));
    }
    if taus.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
        return Err(Error::InvalidConfig("quantile indices must lie in (0,1)".into()));
    }
    match recipe.method {
        InstrumentMethod::Parametric => build_parametric(ds, recipe, taus),
        InstrumentMethod::NonparametricFull => {
            check_beta0(taus, beta0)?;
            build_nonparametric(ds, recipe, taus, beta0)
        }
        InstrumentMethod::NonparametricCluster => {
            check_beta0(taus, beta0)?;
            build_cluster_level(ds, recipe, taus, beta0)
        }
    }
}

fn check_beta0(taus: &[f64], beta0: &[f64]) -> Result<()> {
    if beta0.len() != taus.len() {
        return Err(Error::InvalidConfig(format!(
            "beta0 must supply one null value per quantile index ({} vs {})",
            beta0.len(),
            taus.len()
        )));
    }
    Ok(())
}

/// Parametric recipe: `phi_i = lambda_Z' (Z_i - pi' W_i)`, a scalar invariant
/// in tau (replicated across the requested quantile indices).
pub fn build_parametric(
    ds: &ClusteredDataset,
    recipe: &InstrumentRecipe,
    taus: &[f64],
) -> Result<InstrumentSet> {
    let n = ds.n();
    let dz = ds.d_z();

    // pi: OLS of each instrument column on W (linear link)
    let mut z_resid = DMatrix::zeros(n, dz);
    for k in 0..dz {
        let zk = ds.z.column(k).into_owned();
        let pik = linalg::ols(&ds.w, &zk, "regression of Z on W")?;
        let fitted = &ds.w * &pik;
        for i in 0..n {
            z_resid[(i, k)] = zk[i] - fitted[i];
        }
    }

    let scale = ds.z.amax().max(1.0);
    let mut warnings = Vec::new();
    let mut phi = DVector::zeros(n);
    let zhat;
    if z_resid.amax() <= 1e-10 * scale {
        // Z lies in the span of W: the residual is identically zero, so the
        // instrument vanishes no matter what the first stage says.
        warnings.push(Warning::DegenerateInstrument);
        zhat = DVector::zeros(n);
    } else {
        let fs = first_stage(ds)?;
        let lambda_z = fs.lambda.rows(0, dz).into_owned();
        for i in 0..n {
            let mut s = 0.0;
            for k in 0..dz {
                s += lambda_z[k] * z_resid[(i, k)];
            }
            phi[i] = s;
        }
        if phi.amax() <= 1e-10 * scale {
            warnings.push(Warning::DegenerateInstrument);
        }
        zhat = fs.zhat;
    }

    let values = taus
        .iter()
        .map(|_| DMatrix::from_column_slice(n, 1, phi.as_slice()))
        .collect();
    let set = InstrumentSet {
        values,
        zhat,
        recipe: recipe.clone(),
        taus: taus.to_vec(),
        warnings,
    };
    set.check_finite()?;
    Ok(set)
}

/// Which rule-of-thumb bandwidth to compute. `H1`/`H2` average over the full
/// sample; `H3j`/`H4j` over a single cluster with the cluster-size rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BandwidthKind {
    H1,
    H2,
    H3j,
    H4j,
}

/// The factor `q(tau) = (1 - F_N^{-1}(tau))^2 f_N(F_N^{-1}(tau))`.
pub fn q_factor(tau: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let q = normal.inverse_cdf(tau);
    (1.0 - q) * (1.0 - q) * normal.pdf(q)
}

/// Rule-of-thumb bandwidth over the rows `range` (the full sample for
/// `H1`/`H2`, a cluster for `H3j`/`H4j`).
pub fn rule_of_thumb_bandwidth(
    which: BandwidthKind,
    tau: f64,
    w: &DMatrix<f64>,
    v: &DVector<f64>,
    zhat: &DVector<f64>,
    resid: &DVector<f64>,
    range: std::ops::Range<usize>,
) -> Result<f64> {
    let m = range.len();
    if m < 2 {
        return Err(Error::EmptyCluster {
            cluster: range.start,
            size: m,
            min: 2,
        });
    }
    let dw = w.ncols();
    let s_hat = linalg::sample_sd(&resid.as_slice()[range.clone()]);
    let q = q_factor(tau);

    let (numer, denom) = match which {
        BandwidthKind::H1 | BandwidthKind::H3j => {
            // 4.5 * mean(V ||W||^4) over q(tau) * ||mean(V W W')||_F^2
            let mut num = 0.0;
            let mut gram = DMatrix::zeros(dw, dw);
            for i in range.clone() {
                let wi = w.row(i);
                let norm2: f64 = wi.iter().map(|x| x * x).sum();
                num += v[i] * norm2 * norm2;
                for a in 0..dw {
                    for b in 0..dw {
                        gram[(a, b)] += v[i] * wi[a] * wi[b];
                    }
                }
            }
            num /= m as f64;
            gram /= m as f64;
            let fro2: f64 = gram.iter().map(|x| x * x).sum();
            (4.5 * num, q * fro2)
        }
        BandwidthKind::H2 | BandwidthKind::H4j => {
            let mut num = 0.0;
            let mut cross = DVector::zeros(dw);
            for i in range.clone() {
                let wi = w.row(i);
                let norm2: f64 = wi.iter().map(|x| x * x).sum();
                num += v[i] * norm2 * zhat[i] * zhat[i];
                for a in 0..dw {
                    cross[a] += v[i] * wi[a] * zhat[i];
                }
            }
            num /= m as f64;
            cross /= m as f64;
            let fro2: f64 = cross.iter().map(|x| x * x).sum();
            (4.5 * num, q * fro2)
        }
    };
    if denom <= 0.0 || numer <= 0.0 {
        return Err(Error::SingularMoment {
            context: "rule-of-thumb bandwidth moments".into(),
        });
    }
    Ok(s_hat * (numer / denom).powf(0.2) * (m as f64).powf(-0.2))
}

/// `chi` from the smoothed moment matrices, written with the explicit
/// generalized-inverse sandwich. For symmetric PSD `qww` this equals
/// `pinv(qww) * qwz`; the sandwich form is kept because the identity
/// `qww * chi = qww * pinv(qww) * qwz` is asserted by tests on
/// rank-deficient Gram matrices.
pub fn chi_from_moments(qww: &DMatrix<f64>, qwz: &DVector<f64>) -> DVector<f64> {
    let pinv = linalg::pinv_psd(qww);
    qww * &pinv * &pinv * qwz
}

struct SmoothedMoments {
    qww: DMatrix<f64>,
    qwz: DVector<f64>,
    /// Number of observations inside either kernel window.
    hits: usize,
}

/// Kernel-smoothed moments over `range` with bandwidths `h_ww` (for the W
/// Gram) and `h_wz` (for the W x zhat cross moment), uniform kernel.
fn smoothed_moments(
    w: &DMatrix<f64>,
    v: &DVector<f64>,
    zhat: &DVector<f64>,
    resid: &DVector<f64>,
    h_ww: f64,
    h_wz: f64,
    range: std::ops::Range<usize>,
) -> SmoothedMoments {
    let dw = w.ncols();
    let m = range.len() as f64;
    let mut qww = DMatrix::zeros(dw, dw);
    let mut qwz = DVector::zeros(dw);
    let mut hits = 0usize;
    for i in range {
        let e = resid[i];
        let in_ww = e.abs() <= h_ww;
        let in_wz = e.abs() <= h_wz;
        if !(in_ww || in_wz) {
            continue;
        }
        hits += 1;
        let wi = w.row(i);
        if in_ww {
            let k = v[i] / (2.0 * h_ww);
            for a in 0..dw {
                for b in 0..dw {
                    qww[(a, b)] += k * wi[a] * wi[b];
                }
            }
        }
        if in_wz {
            let k = v[i] / (2.0 * h_wz);
            for a in 0..dw {
                qwz[a] += k * wi[a] * zhat[i];
            }
        }
    }
    qww /= m;
    qwz /= m;
    SmoothedMoments { qww, qwz, hits }
}

/// Residual of the null-restricted fit that uses the first-stage fitted
/// value as the instrument: `eps_i = y_i - x_i b0 - w_i' gamma_r`.
fn restricted_residual(
    ds: &ClusteredDataset,
    zhat: &DVector<f64>,
    tau: f64,
    beta0: f64,
) -> Result<DVector<f64>> {
    let n = ds.n();
    let dw = ds.d_w();
    let mut design = DMatrix::zeros(n, dw + 1);
    design.view_mut((0, 0), (n, dw)).copy_from(&ds.w);
    design.view_mut((0, dw), (n, 1)).copy_from(zhat);
    let kernel = qr_solver::Kernel::new(&design, ds.v.as_slice(), tau)?;
    let y: Vec<f64> = (0..n).map(|i| ds.y[i] - ds.x[i] * beta0).collect();
    let shift = vec![0.0; dw + 1];
    let sol = kernel.solver().solve(&y, &shift, None)?;
    let gamma = &sol.eta[..dw];
    Ok(DVector::from_fn(n, |i, _| {
        let mut r = ds.y[i] - ds.x[i] * beta0;
        for (a, g) in gamma.iter().enumerate() {
            r -= ds.w[(i, a)] * g;
        }
        r
    }))
}

/// Full-sample nonparametric recipe.
pub fn build_nonparametric(
    ds: &ClusteredDataset,
    recipe: &InstrumentRecipe,
    taus: &[f64],
    beta0: &[f64],
) -> Result<InstrumentSet> {
    let fs = first_stage(ds)?;
    let n = ds.n();
    let full = 0..n;
    let mut values = Vec::with_capacity(taus.len());
    let mut warnings = Vec::new();

    for (t, (&tau, &b0)) in taus.iter().zip(beta0.iter()).enumerate() {
        let resid = restricted_residual(ds, &fs.zhat, tau, b0)?;
        let h1 = match recipe.bandwidths.h1 {
            Some(h) => h,
            None => rule_of_thumb_bandwidth(
                BandwidthKind::H1,
                tau,
                &ds.w,
                &ds.v,
                &fs.zhat,
                &resid,
                full.clone(),
            )?,
        };
        let h2 = match recipe.bandwidths.h2 {
            Some(h) => h,
            None => rule_of_thumb_bandwidth(
                BandwidthKind::H2,
                tau,
                &ds.w,
                &ds.v,
                &fs.zhat,
                &resid,
                full.clone(),
            )?,
        };
        let mom = smoothed_moments(&ds.w, &ds.v, &fs.zhat, &resid, h1, h2, full.clone());
        if mom.hits == 0 {
            return Err(Error::AllResidualsOutsideBandwidth {
                bandwidth: h1.min(h2),
            });
        }
        let chi = chi_from_moments(&mom.qww, &mom.qwz);
        let phi = DMatrix::from_fn(n, 1, |i, _| fs.zhat[i] - ds.w.row(i).transpose().dot(&chi));
        if t == 0 {
            let scale = fs.zhat.amax().max(1.0);
            if phi.amax() <= 1e-10 * scale {
                warnings.push(Warning::DegenerateInstrument);
            }
        }
        values.push(phi);
    }

    let set = InstrumentSet {
        values,
        zhat: fs.zhat,
        recipe: recipe.clone(),
        taus: taus.to_vec(),
        warnings,
    };
    set.check_finite()?;
    Ok(set)
}

/// Cluster-level nonparametric recipe: per-cluster moments and bandwidths.
/// Clusters whose kernel window captures nothing fall back to `chi_j = 0`
/// (the generalized inverse of a zero Gram), leaving `phi = zhat` there.
pub fn build_cluster_level(
    ds: &ClusteredDataset,
    recipe: &InstrumentRecipe,
    taus: &[f64],
    beta0: &[f64],
) -> Result<InstrumentSet> {
    let fs = first_stage(ds)?;
    let n = ds.n();
    let nj = ds.n_clusters();
    let mut warnings = Vec::new();
    for j in 0..nj {
        let size = ds.cluster_range(j).len();
        if size < 2 {
            return Err(Error::EmptyCluster {
                cluster: j,
                size,
                min: 2,
            });
        }
        if size < 10 {
            warnings.push(Warning::SmallCluster { cluster: j, size });
        }
    }

    let mut values = Vec::with_capacity(taus.len());
    for (&tau, &b0) in taus.iter().zip(beta0.iter()) {
        let resid = restricted_residual(ds, &fs.zhat, tau, b0)?;
        let mut phi = DMatrix::zeros(n, 1);
        for j in 0..nj {
            let range = ds.cluster_range(j);
            let h3 = match recipe.bandwidths.h3 {
                Some(h) => h,
                None => rule_of_thumb_bandwidth(
                    BandwidthKind::H3j,
                    tau,
                    &ds.w,
                    &ds.v,
                    &fs.zhat,
                    &resid,
                    range.clone(),
                )?,
            };
            let h4 = match recipe.bandwidths.h4 {
                Some(h) => h,
                None => rule_of_thumb_bandwidth(
                    BandwidthKind::H4j,
                    tau,
                    &ds.w,
                    &ds.v,
                    &fs.zhat,
                    &resid,
                    range.clone(),
                )?,
            };
            let mom = smoothed_moments(&ds.w, &ds.v, &fs.zhat, &resid, h3, h4, range.clone());
            let chi_j = chi_from_moments(&mom.qww, &mom.qwz);
            for i in range {
                phi[(i, 0)] = fs.zhat[i] - ds.w.row(i).transpose().dot(&chi_j);
            }
        }
        values.push(phi);
    }

    let set = InstrumentSet {
        values,
        zhat: fs.zhat,
        recipe: recipe.clone(),
        taus: taus.to_vec(),
        warnings,
    };
    set.check_finite()?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn dataset(
        y: Vec<f64>,
        x: Vec<f64>,
        w_extra: Option<Vec<f64>>,
        z: Vec<f64>,
        labels: Vec<i64>,
    ) -> ClusteredDataset {
        let n = y.len();
        let w = match w_extra {
            Some(col) => DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { col[i] }),
            None => DMatrix::from_element(n, 1, 1.0),
        };
        ClusteredDataset::new(y, x, w, DMatrix::from_column_slice(n, 1, &z), &labels, None).unwrap()
    }

    #[test]
    fn first_stage_exact_fit() {
        // X = Z exactly, W = intercept, Z centered: lambda_Z = 1, intercept = mean(X) = 0
        let z = vec![-1.0, 0.5, 0.5, -1.0, 1.0, 0.0];
        let ds = dataset(vec![0.0; 6], z.clone(), None, z, vec![0, 0, 0, 1, 1, 1]);
        let fs = first_stage(&ds).unwrap();
        assert_relative_eq!(fs.lambda[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(fs.lambda[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn first_stage_matches_normal_equations() {
        // independent oracle: solve the 2x2 normal equations by hand
        let z = vec![0.3, -0.8, 1.2, 0.1, -0.5, 0.9, -1.1, 0.4, 0.6, -0.2];
        let x = vec![0.1, 0.2, -0.4, 0.5, 0.3, -0.1, 0.2, 0.0, -0.3, 0.4];
        let labels: Vec<i64> = vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
        let ds = dataset(vec![0.0; 10], x.clone(), None, z.clone(), labels);
        let fs = first_stage(&ds).unwrap();

        let n = 10.0;
        let szz: f64 = z.iter().map(|v| v * v).sum();
        let sz: f64 = z.iter().sum();
        let szx: f64 = z.iter().zip(&x).map(|(a, b)| a * b).sum();
        let sx: f64 = x.iter().sum();
        let det = szz * n - sz * sz;
        let lam_z = (n * szx - sz * sx) / det;
        let lam_w = (szz * sx - sz * szx) / det;
        assert_relative_eq!(fs.lambda[0], lam_z, epsilon = 1e-10);
        assert_relative_eq!(fs.lambda[1], lam_w, epsilon = 1e-10);
        assert!(lam_z.abs() < 0.5, "independent noise should give a small slope");
    }

    #[test]
    fn parametric_with_intercept_only_demeans() {
        let z = vec![1.0, 3.0, 2.0, 6.0];
        let x = vec![0.5, 1.4, 1.1, 2.9];
        let ds = dataset(vec![0.0; 4], x, None, z.clone(), vec![0, 0, 1, 1]);
        let recipe = InstrumentRecipe::new(InstrumentMethod::Parametric);
        let set = build_parametric(&ds, &recipe, &[0.5]).unwrap();
        let fs = first_stage(&ds).unwrap();
        let zbar = z.iter().sum::<f64>() / 4.0;
        for i in 0..4 {
            assert_relative_eq!(set.phi(0)[(i, 0)], fs.lambda[0] * (z[i] - zbar), epsilon = 1e-10);
        }
    }

    #[test]
    fn parametric_z_equals_w_is_degenerate() {
        // Z identical to the non-constant control column: residual of Z on W
        // is zero, so phi vanishes and a warning is flagged.
        let col = vec![0.4, 1.9, -0.6, 2.2, 0.8, -1.3];
        let ds = dataset(
            vec![0.0; 6],
            vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0],
            Some(col.clone()),
            col,
            vec![0, 0, 0, 1, 1, 1],
        );
        let recipe = InstrumentRecipe::new(InstrumentMethod::Parametric);
        let set = build_parametric(&ds, &recipe, &[0.5]).unwrap();
        assert!(set.warnings.contains(&Warning::DegenerateInstrument));
        assert!(set.phi(0).amax() <= 1e-10);
    }

    #[test]
    fn q_factor_anchors() {
        assert_relative_eq!(q_factor(0.5), 0.398942, epsilon = 1e-6);
        assert_relative_eq!(q_factor(0.75), 0.033668, epsilon = 1e-5);
    }

    #[test]
    fn chi_identity_on_rank_deficient_gram() {
        // duplicated coordinate makes the Gram rank-deficient; the identity
        // qww * chi = qww * pinv(qww) * qwz must hold exactly
        let base = DMatrix::from_row_slice(3, 2, &[1.0, 0.2, 0.3, 1.0, 0.5, -0.7]);
        let gram_small = &base.transpose() * &base;
        let mut qww = DMatrix::zeros(3, 3);
        // embed with a duplicated last row/column
        for a in 0..2 {
            for b in 0..2 {
                qww[(a, b)] = gram_small[(a, b)];
            }
            qww[(a, 2)] = gram_small[(a, 1)];
            qww[(2, a)] = gram_small[(1, a)];
        }
        qww[(2, 2)] = gram_small[(1, 1)];
        let qwz = DVector::from_column_slice(&[1.0, -0.5, -0.5]);
        let chi = chi_from_moments(&qww, &qwz);
        let lhs = &qww * &chi;
        let rhs = &qww * linalg::pinv_psd(&qww) * &qwz;
        for i in 0..3 {
            assert_relative_eq!(lhs[i], rhs[i], epsilon = 1e-8);
        }
    }

    #[test]
    fn chi_projection_equals_dropping_duplicate() {
        // chi' w with a duplicated column equals the reduced chi on the
        // deduplicated design (pinv splits the weight across the copies)
        let w_small = DMatrix::from_row_slice(4, 2, &[1.0, 0.5, 1.0, -0.3, 1.0, 1.1, 1.0, 0.2]);
        let qww_small = (&w_small.transpose() * &w_small) / 4.0;
        let qwz_small = DVector::from_column_slice(&[0.8, 0.1]);
        let chi_small = chi_from_moments(&qww_small, &qwz_small);

        // duplicate the second coordinate
        let w_dup = DMatrix::from_fn(4, 3, |i, j| if j < 2 { w_small[(i, j)] } else { w_small[(i, 1)] });
        let qww_dup = (&w_dup.transpose() * &w_dup) / 4.0;
        let qwz_dup = DVector::from_column_slice(&[0.8, 0.1, 0.1]);
        let chi_dup = chi_from_moments(&qww_dup, &qwz_dup);

        for i in 0..4 {
            let proj_small = w_small.row(i).transpose().dot(&chi_small);
            let proj_dup = w_dup.row(i).transpose().dot(&chi_dup);
            assert_relative_eq!(proj_small, proj_dup, epsilon = 1e-9);
        }
    }

    fn synthetic(n: usize, seed: u64) -> ClusteredDataset {
        // deterministic synthetic data with real first-stage signal
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
            let zv = 0.7 * wv + next();
            let xv = 0.8 * zv + 0.4 * next();
            let yv = 1.2 * xv + 0.5 * wv + next();
            wcol.push(wv);
            z.push(zv);
            x.push(xv);
            y.push(yv);
            labels.push((i % 3) as i64);
        }
        let w = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { wcol[i] });
        ClusteredDataset::new(y, x, w, DMatrix::from_column_slice(n, 1, &z), &labels, None).unwrap()
    }

    #[test]
    fn nonparametric_intercept_only_kernel_demeans() {
        let n = 40;
        let base = synthetic(n, 5);
        // strip to intercept-only controls
        let ds = ClusteredDataset::new(
            base.y.as_slice().to_vec(),
            base.x.as_slice().to_vec(),
            DMatrix::from_element(n, 1, 1.0),
            base.z.clone(),
            &vec![0i64; n],
            None,
        )
        .unwrap();
        let recipe = InstrumentRecipe::new(InstrumentMethod::NonparametricFull);
        let set = build_nonparametric(&ds, &recipe, &[0.5], &[1.2]).unwrap();

        // oracle: chi = (kernel mean of zhat at h2) / (kernel mass at h1)
        let fs = first_stage(&ds).unwrap();
        let resid = restricted_residual(&ds, &fs.zhat, 0.5, 1.2).unwrap();
        let h1 = rule_of_thumb_bandwidth(BandwidthKind::H1, 0.5, &ds.w, &ds.v, &fs.zhat, &resid, 0..n).unwrap();
        let h2 = rule_of_thumb_bandwidth(BandwidthKind::H2, 0.5, &ds.w, &ds.v, &fs.zhat, &resid, 0..n).unwrap();
        let mut mass = 0.0;
        let mut zsum = 0.0;
        for i in 0..n {
            if resid[i].abs() <= h1 {
                mass += 1.0 / (2.0 * h1);
            }
            if resid[i].abs() <= h2 {
                zsum += fs.zhat[i] / (2.0 * h2);
            }
        }
        let chi = zsum / mass;
        for i in 0..n {
            assert_relative_eq!(set.phi(0)[(i, 0)], fs.zhat[i] - chi, epsilon = 1e-9);
        }
    }

    #[test]
    fn nonparametric_matches_dense_oracle() {
        let ds = synthetic(60, 11);
        let recipe = InstrumentRecipe::new(InstrumentMethod::NonparametricFull);
        let set = build_nonparametric(&ds, &recipe, &[0.5], &[1.2]).unwrap();

        // independent dense-matrix evaluation
        let fs = first_stage(&ds).unwrap();
        let resid = restricted_residual(&ds, &fs.zhat, 0.5, 1.2).unwrap();
        let n = ds.n();
        let h1 = rule_of_thumb_bandwidth(BandwidthKind::H1, 0.5, &ds.w, &ds.v, &fs.zhat, &resid, 0..n).unwrap();
        let h2 = rule_of_thumb_bandwidth(BandwidthKind::H2, 0.5, &ds.w, &ds.v, &fs.zhat, &resid, 0..n).unwrap();
        let mut qww = DMatrix::zeros(2, 2);
        let mut qwz = DVector::zeros(2);
        for i in 0..n {
            if resid[i].abs() <= h1 {
                let wi = ds.w.row(i).transpose();
                qww += (&wi * wi.transpose()) / (2.0 * h1);
            }
            if resid[i].abs() <= h2 {
                qwz += ds.w.row(i).transpose() * (fs.zhat[i] / (2.0 * h2));
            }
        }
        qww /= n as f64;
        qwz /= n as f64;
        let chi = qww
            .clone()
            .try_inverse()
            .expect("full-rank smoothed gram")
            * &qwz;
        for i in 0..n {
            let expect = fs.zhat[i] - ds.w.row(i).transpose().dot(&chi);
            assert_relative_eq!(set.phi(0)[(i, 0)], expect, epsilon = 1e-8);
        }
    }

    #[test]
    fn cluster_level_single_cluster_equals_full_sample() {
        let base = synthetic(50, 3);
        let n = base.n();
        let ds = ClusteredDataset::new(
            base.y.as_slice().to_vec(),
            base.x.as_slice().to_vec(),
            base.w.clone(),
            base.z.clone(),
            &vec![0i64; n],
            None,
        )
        .unwrap();
        let full = build_nonparametric(
            &ds,
            &InstrumentRecipe::new(InstrumentMethod::NonparametricFull),
            &[0.25],
            &[1.2],
        )
        .unwrap();
        let cl = build_cluster_level(
            &ds,
            &InstrumentRecipe::new(InstrumentMethod::NonparametricCluster),
            &[0.25],
            &[1.2],
        )
        .unwrap();
        for i in 0..n {
            assert_relative_eq!(full.phi(0)[(i, 0)], cl.phi(0)[(i, 0)], epsilon = 1e-10);
        }
    }

    #[test]
    fn cluster_level_zero_window_falls_back_to_zhat() {
        let ds = synthetic(45, 9);
        let recipe = InstrumentRecipe {
            bandwidths: BandwidthOverrides {
                h3: Some(1e-12),
                h4: Some(1e-12),
                ..Default::default()
            },
            ..InstrumentRecipe::new(InstrumentMethod::NonparametricCluster)
        };
        let set = build_cluster_level(&ds, &recipe, &[0.5], &[1.2]).unwrap();
        let fs = first_stage(&ds).unwrap();
        // with a vanishing window no residual is captured, chi_j = 0
        for i in 0..ds.n() {
            assert_relative_eq!(set.phi(0)[(i, 0)], fs.zhat[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn cluster_level_matches_per_cluster_oracle() {
        let ds = synthetic(60, 21);
        let recipe = InstrumentRecipe::new(InstrumentMethod::NonparametricCluster);
        let set = build_cluster_level(&ds, &recipe, &[0.5], &[1.2]).unwrap();
        let fs = first_stage(&ds).unwrap();
        let resid = restricted_residual(&ds, &fs.zhat, 0.5, 1.2).unwrap();
        for j in 0..ds.n_clusters() {
            let range = ds.cluster_range(j);
            let h3 = rule_of_thumb_bandwidth(BandwidthKind::H3j, 0.5, &ds.w, &ds.v, &fs.zhat, &resid, range.clone()).unwrap();
            let h4 = rule_of_thumb_bandwidth(BandwidthKind::H4j, 0.5, &ds.w, &ds.v, &fs.zhat, &resid, range.clone()).unwrap();
            let m = range.len() as f64;
            let mut qww = DMatrix::zeros(2, 2);
            let mut qwz = DVector::zeros(2);
            for i in range.clone() {
                if resid[i].abs() <= h3 {
                    let wi = ds.w.row(i).transpose();
                    qww += (&wi * wi.transpose()) / (2.0 * h3);
                }
                if resid[i].abs() <= h4 {
                    qwz += ds.w.row(i).transpose() * (fs.zhat[i] / (2.0 * h4));
                }
            }
            qww /= m;
            qwz /= m;
            let chi_j = chi_from_moments(&qww, &qwz);
            for i in range {
                let expect = fs.zhat[i] - ds.w.row(i).transpose().dot(&chi_j);
                assert_relative_eq!(set.phi(0)[(i, 0)], expect, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn small_cluster_triggers_warning_and_tiny_cluster_errors() {
        let ds = synthetic(24, 2); // clusters of size 8 each
        let recipe = InstrumentRecipe::new(InstrumentMethod::NonparametricCluster);
        let set = build_cluster_level(&ds, &recipe, &[0.5], &[1.2]).unwrap();
        assert!(set
            .warnings
            .iter()
            .any(|w| matches!(w, Warning::SmallCluster { .. })));

        // a singleton cluster is an error
        let n = 7;
        let base = synthetic(n, 4);
        let mut labels = vec![0i64; n];
        labels[n - 1] = 1;
        let ds2 = ClusteredDataset::new(
            base.y.as_slice().to_vec(),
            base.x.as_slice().to_vec(),
            base.w.clone(),
            base.z.clone(),
            &labels,
            None,
        )
        .unwrap();
        assert!(matches!(
            build_cluster_level(&ds2, &recipe, &[0.5], &[1.2]),
            Err(Error::EmptyCluster { .. })
        ));
    }
}
