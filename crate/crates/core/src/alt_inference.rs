//! Baseline inference methods for comparison: a conventional normal-critical
//! value Wald test, the group-based t-test, and its sign-change
//! randomization variant. The group-based methods estimate the model
//! separately inside every cluster and therefore need identification in each
//! one, which is exactly what breaks down under weak IV clusters.

use statrs::distribution::{Continuous, ContinuousCDF, Normal, StudentsT};

use crate::bootstrap::{self, critical_value, Method, ModeTag, SignVector, TestResult, WaldConfig};
use crate::dataset::ClusteredDataset;
use crate::error::{Error, Result, Warning};
use crate::estimator::{self, A1Choice, ProfileGrid};
use crate::instruments::{InstrumentMethod, InstrumentRecipe, InstrumentSet};

/// Sign-change magnitude reported when a randomized t-statistic divides by a
/// zero standard deviation with a nonzero mean.
const T_SATURATION: f64 = 1e300;

/// Per-cluster IVQR estimates of the endogenous coefficient.
#[derive(Debug, Clone)]
pub struct GroupEstimates {
    pub tau: f64,
    /// `betas[j]` for clusters that estimated successfully.
    pub betas: Vec<f64>,
    /// Clusters whose estimation failed, with the cause.
    pub failures: Vec<(usize, Error)>,
    pub n_clusters: usize,
}

/// Runs IVQR separately inside every cluster. Instruments are rebuilt from
/// each cluster's own rows (the cluster-level recipe restricted to a single
/// cluster), with the same grid and norm weighting as the full-sample fit.
pub fn group_estimates(
    ds: &ClusteredDataset,
    recipe: &InstrumentRecipe,
    grid: &ProfileGrid,
    a1: &A1Choice,
    tau: f64,
    beta0: f64,
) -> GroupEstimates {
    let nj = ds.n_clusters();
    let mut betas = Vec::with_capacity(nj);
    let mut failures = Vec::new();
    let forced = InstrumentRecipe {
        method: match recipe.method {
            InstrumentMethod::Parametric => InstrumentMethod::Parametric,
            _ => InstrumentMethod::NonparametricCluster,
        },
        ..recipe.clone()
    };
    for j in 0..nj {
        let sub = ds.restrict_to_cluster(j);
        match fit_one_cluster(&sub, &forced, grid, a1, tau, beta0) {
            Ok(b) => betas.push(b),
            Err(e) => failures.push((j, e)),
        }
    }
    GroupEstimates {
        tau,
        betas,
        failures,
        n_clusters: nj,
    }
}

fn fit_one_cluster(
    sub: &ClusteredDataset,
    recipe: &InstrumentRecipe,
    grid: &ProfileGrid,
    a1: &A1Choice,
    tau: f64,
    beta0: f64,
) -> Result<f64> {
    let inst = crate::instruments::build(sub, recipe, &[tau], &[beta0])?;
    if inst
        .warnings
        .iter()
        .any(|w| matches!(w, Warning::DegenerateInstrument))
    {
        return Err(Error::SingularMoment {
            context: "cluster instrument is identically zero".into(),
        });
    }
    let fit = estimator::estimate(sub, &inst, grid, a1)?;
    Ok(fit.fits[0].beta)
}

fn require_all_clusters(group: &GroupEstimates) -> Result<()> {
    if let Some((cluster, cause)) = group.failures.first() {
        return Err(Error::ClusterFitFailure {
            cluster: *cluster,
            source: Box::new(cause.clone()),
        });
    }
    if group.betas.len() < 2 {
        return Err(Error::InvalidConfig(
            "group-based tests need at least two clusters".into(),
        ));
    }
    Ok(())
}

/// The group t-statistic `sqrt(J) (mean(beta_j) - beta0) / sd(beta_j)` with
/// the `J - 1` denominator in the standard deviation.
fn group_t(betas: &[f64], beta0: f64) -> Option<f64> {
    let j = betas.len() as f64;
    let mean = betas.iter().sum::<f64>() / j;
    let sd = crate::linalg::sample_sd(betas);
    if sd == 0.0 {
        return None;
    }
    Some(j.sqrt() * (mean - beta0) / sd)
}

/// Group-based t-test against the two-sided Student-t critical value with
/// `J - 1` degrees of freedom.
pub fn im_test(group: &GroupEstimates, beta0: f64, alpha: f64) -> Result<TestResult> {
    require_all_clusters(group)?;
    let t = group_t(&group.betas, beta0).ok_or(Error::NonInformative)?;
    let j = group.betas.len();
    let dist = StudentsT::new(0.0, 1.0, (j - 1) as f64)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let cv = dist.inverse_cdf(1.0 - alpha / 2.0);
    let stat = t.abs();
    Ok(TestResult {
        method: Method::Im,
        taus: vec![group.tau],
        beta0: vec![beta0],
        statistic: stat,
        critical_value: cv,
        p_value: 2.0 * (1.0 - dist.cdf(stat)),
        alpha,
        reject: stat > cv,
        n_sign_vectors: 0,
        mode: ModeTag::Analytic,
        excluded_draws: 0,
        warnings: Vec::new(),
    })
}

/// The same group t-statistic compared against the critical value of its
/// sign-change randomization distribution over `{-1,+1}^J`.
pub fn crs_test(group: &GroupEstimates, beta0: f64, alpha: f64) -> Result<TestResult> {
    require_all_clusters(group)?;
    let j = group.betas.len();
    if j > 14 {
        return Err(Error::InvalidConfig(format!(
            "sign-change enumeration over 2^{j} group estimates is not supported"
        )));
    }
    let diffs: Vec<f64> = group.betas.iter().map(|b| b - beta0).collect();
    let total = 1usize << j;
    let mut stats = Vec::with_capacity(total);
    for mask in 0..total as u64 {
        let g = SignVector::from_mask(mask, j);
        let flipped: Vec<f64> = diffs
            .iter()
            .zip(&g.0)
            .map(|(d, &s)| f64::from(s) * d)
            .collect();
        let stat = match group_t(&flipped, 0.0) {
            Some(t) => t.abs(),
            None => {
                // zero spread: all flipped differences equal; infinite t when
                // their common value is nonzero, zero otherwise
                let mean = flipped.iter().sum::<f64>() / j as f64;
                if mean == 0.0 {
                    0.0
                } else {
                    T_SATURATION
                }
            }
        };
        stats.push(stat);
    }
    let observed = stats[0]; // mask 0 is the identity sign vector
    let lo = stats.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = stats.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Err(Error::NonInformative);
    }
    let cv = critical_value(&stats, alpha);
    let count_ge = stats.iter().filter(|&&s| s >= observed).count();
    Ok(TestResult {
        method: Method::Crs,
        taus: vec![group.tau],
        beta0: vec![beta0],
        statistic: observed,
        critical_value: cv,
        p_value: count_ge.max(1) as f64 / total as f64,
        alpha,
        reject: observed > cv,
        n_sign_vectors: total,
        mode: ModeTag::Enumerate,
        excluded_draws: 0,
        warnings: Vec::new(),
    })
}

/// The two-sided standard-normal quantile.
pub fn z_quantile(alpha: f64) -> f64 {
    Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(1.0 - alpha / 2.0)
}

/// Critical-value family of the conventional test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TStdCritical {
    /// Two-sided Student-t with `J - 1` degrees of freedom, the usual
    /// convention for cluster-robust t statistics with few clusters. This
    /// is what reproduces the published rejection levels.
    #[default]
    StudentT,
    /// Two-sided standard normal.
    Normal,
}

/// Conventional asymptotic cluster-robust Wald test, no bootstrap:
/// `t = sqrt(n) |beta_hat - beta0| (Q' Omega^-1 Q)^{1/2}` with the
/// kernel-density-weighted Jacobian `Q = P_n K_h(e) phi x v` on fitted
/// residuals (Hendricks-Koenker bandwidth, uniform kernel) and the
/// small-cluster-corrected score CRVE.
pub fn t_std_test(
    ds: &ClusteredDataset,
    inst: &InstrumentSet,
    beta0: &[f64],
    cfg: &WaldConfig,
    critical: TStdCritical,
) -> Result<TestResult> {
    use crate::estimator::TauDesign;
    use nalgebra::DVector;
    if beta0.len() != inst.taus.len() {
        return Err(Error::InvalidConfig(
            "beta0 must match the instrument quantile indices".into(),
        ));
    }
    let n = ds.n();
    let nj = ds.n_clusters();
    if nj < 2 {
        return Err(Error::InvalidConfig(
            "the conventional cluster-robust test needs at least two clusters".into(),
        ));
    }
    let mut stat = 0.0f64;
    for t in 0..inst.taus.len() {
        let td = TauDesign::new(ds, inst, t)?;
        let a1m = cfg.a1.matrix(&td, ds)?;
        let p = td.d_w + td.d_phi;
        let zero = vec![0.0; p];
        let mut solver = td.kernel.solver();
        let est = estimator::grid_search(&td, ds, &mut solver, &cfg.grid, &a1m, &zero, None, None)?;

        let mut eta_fit = DVector::zeros(p);
        eta_fit.rows_mut(0, td.d_w).copy_from(&est.gamma);
        let fitted_phi =
            bootstrap::cluster_score_sums(&td, ds, est.beta, &eta_fit).phi_block(td.d_phi);
        let correction =
            (nj as f64 / (nj as f64 - 1.0)) * ((n as f64 - 1.0) / (n as f64 - p as f64));
        let omega = bootstrap::omega_from_phi_sums(&fitted_phi, n) * correction;
        let omega_inv = omega.clone().try_inverse().ok_or(Error::SingularCrve {
            value: omega.determinant(),
        })?;

        let resid = DVector::from_fn(n, |i, _| {
            let mut r = ds.y[i] - est.beta * ds.x[i];
            for c in 0..td.d_w {
                r -= td.design[(i, c)] * est.gamma[c];
            }
            r
        });
        let band = hendricks_koenker_band(resid.as_slice(), td.tau);
        let mut q = DVector::zeros(td.d_phi);
        for i in 0..n {
            if resid[i].abs() <= band {
                for a in 0..td.d_phi {
                    q[a] += td.design[(i, td.d_w + a)] * ds.x[i] * ds.v[i] / (2.0 * band);
                }
            }
        }
        q /= n as f64;
        let quad = q.dot(&(&omega_inv * &q));
        if quad <= 0.0 {
            return Err(Error::SingularCrve { value: quad });
        }
        let t_tau = (n as f64).sqrt() * (est.beta - beta0[t]).abs() * quad.sqrt();
        stat = stat.max(t_tau);
    }

    let (cv, p_value) = match critical {
        TStdCritical::StudentT => {
            let dist = StudentsT::new(0.0, 1.0, (nj - 1) as f64)
                .map_err(|e| Error::InvalidConfig(e.to_string()))?;
            (dist.inverse_cdf(1.0 - cfg.alpha / 2.0), 2.0 * (1.0 - dist.cdf(stat)))
        }
        TStdCritical::Normal => {
            let normal = Normal::new(0.0, 1.0).expect("standard normal");
            (z_quantile(cfg.alpha), 2.0 * (1.0 - normal.cdf(stat)))
        }
    };
    Ok(TestResult {
        method: Method::TStd,
        taus: inst.taus.clone(),
        beta0: beta0.to_vec(),
        statistic: stat,
        critical_value: cv,
        p_value,
        alpha: cfg.alpha,
        reject: stat > cv,
        n_sign_vectors: 0,
        mode: ModeTag::Analytic,
        excluded_draws: 0,
        warnings: Vec::new(),
    })
}

/// Uniform-kernel half-width for the sparsity-weighted Jacobian: the
/// Hall-Sheather probability-space bandwidth mapped through normal quantile
/// spacing and a robust residual scale.
pub fn hendricks_koenker_band(resid: &[f64], tau: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let n = resid.len();
    let nf = n as f64;
    let zq = normal.inverse_cdf(1.0 - 0.05 / 2.0);
    let qt = normal.inverse_cdf(tau);
    let hs = nf.powf(-1.0 / 3.0)
        * zq.powf(2.0 / 3.0)
        * (1.5 * normal.pdf(qt) * normal.pdf(qt) / (2.0 * qt * qt + 1.0)).powf(1.0 / 3.0);
    let lo = (tau - hs).max(1e-3);
    let hi = (tau + hs).min(1.0 - 1e-3);
    let mean = resid.iter().sum::<f64>() / nf;
    let sd = (resid.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (nf - 1.0)).sqrt();
    let mut sorted = resid.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let iqr = sorted[(0.75 * (n - 1) as f64) as usize] - sorted[(0.25 * (n - 1) as f64) as usize];
    let kappa = sd.min(iqr / 1.349).max(1e-12);
    kappa * (normal.inverse_cdf(hi) - normal.inverse_cdf(lo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn group(betas: Vec<f64>, tau: f64) -> GroupEstimates {
        GroupEstimates {
            tau,
            n_clusters: betas.len(),
            betas,
            failures: Vec::new(),
        }
    }

    #[test]
    fn z_quantile_at_ten_percent() {
        assert_relative_eq!(z_quantile(0.10), 1.6449, epsilon = 1e-4);
    }

    #[test]
    fn hk_band_is_positive_and_tau_sensitive() {
        let resid: Vec<f64> = (0..200).map(|i| (i as f64 - 100.0) / 40.0).collect();
        let b_mid = hendricks_koenker_band(&resid, 0.5);
        let b_tail = hendricks_koenker_band(&resid, 0.9);
        assert!(b_mid > 0.0 && b_tail > 0.0);
        assert_eq!(b_mid, hendricks_koenker_band(&resid, 0.5));
        assert_ne!(b_mid, b_tail);
    }

    #[test]
    fn im_zero_mean_difference_gives_zero_t() {
        let g = group(vec![1.0, 2.0, 3.0], 0.5);
        let r = im_test(&g, 2.0, 0.10).unwrap();
        assert_relative_eq!(r.statistic, 0.0, epsilon = 1e-12);
        assert!(!r.reject);
    }

    #[test]
    fn im_degenerate_spread_is_non_informative() {
        let g = group(vec![2.0, 2.0, 2.0], 0.5);
        assert!(matches!(im_test(&g, 2.0, 0.10), Err(Error::NonInformative)));
    }

    #[test]
    fn im_uses_student_t_critical_value() {
        let g = group(vec![0.8, 1.1, 1.4, 0.9], 0.5);
        let r = im_test(&g, 0.5, 0.10).unwrap();
        // J = 4: t critical value with 3 degrees of freedom at 5% per side
        let dist = StudentsT::new(0.0, 1.0, 3.0).unwrap();
        assert_relative_eq!(r.critical_value, dist.inverse_cdf(0.95), epsilon = 1e-12);
        assert_eq!(r.reject, r.statistic > r.critical_value);
    }

    #[test]
    fn crs_enumerates_the_full_distribution() {
        let g = group(vec![1.0, 2.0, 4.0], 0.5);
        let beta0 = 1.5;
        let r = crs_test(&g, beta0, 0.10).unwrap();
        assert_eq!(r.n_sign_vectors, 8);

        // hand enumeration of all eight sign patterns
        let d = [-0.5, 0.5, 2.5];
        let mut stats = Vec::new();
        for mask in 0..8u32 {
            let f: Vec<f64> = (0..3)
                .map(|b| if (mask >> b) & 1 == 1 { -d[b as usize] } else { d[b as usize] })
                .collect();
            let mean = f.iter().sum::<f64>() / 3.0;
            let sd = crate::linalg::sample_sd(&f);
            stats.push((3.0f64.sqrt() * mean / sd).abs());
        }
        let cv = critical_value(&stats, 0.10);
        assert_relative_eq!(r.critical_value, cv, epsilon = 1e-12);
        assert_relative_eq!(r.statistic, stats[0], epsilon = 1e-12);
    }

    #[test]
    fn crs_statistic_is_invariant_under_global_flip() {
        let g = group(vec![0.4, -0.3, 0.9, 0.1], 0.5);
        let r = crs_test(&g, 0.0, 0.10).unwrap();
        // every statistic value appears an even number of times because
        // t(-g) = -t(g) and the absolute value collapses the pair
        assert_eq!(r.n_sign_vectors % 2, 0);
        let d: Vec<f64> = g.betas.clone();
        let mut stats = Vec::new();
        for mask in 0..16u32 {
            let f: Vec<f64> = (0..4)
                .map(|b| if (mask >> b) & 1 == 1 { -d[b as usize] } else { d[b as usize] })
                .collect();
            let mean = f.iter().sum::<f64>() / 4.0;
            let sd = crate::linalg::sample_sd(&f);
            stats.push((2.0 * mean / sd).abs());
        }
        for mask in 0..16usize {
            let flipped = !mask & 0xF;
            assert_relative_eq!(stats[mask], stats[flipped], epsilon = 1e-12);
        }
    }

    #[test]
    fn crs_all_zero_differences_is_non_informative() {
        let g = group(vec![1.0, 1.0, 1.0], 0.5);
        assert!(matches!(crs_test(&g, 1.0, 0.10), Err(Error::NonInformative)));
    }

    #[test]
    fn aborts_on_cluster_failure() {
        let mut g = group(vec![1.0, 2.0], 0.5);
        g.failures.push((2, Error::Unbounded));
        g.n_clusters = 3;
        assert!(matches!(
            im_test(&g, 1.0, 0.10),
            Err(Error::ClusterFitFailure { cluster: 2, .. })
        ));
        assert!(matches!(
            crs_test(&g, 1.0, 0.10),
            Err(Error::ClusterFitFailure { .. })
        ));
    }
}
