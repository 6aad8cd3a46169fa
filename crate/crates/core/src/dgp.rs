//! Simulation designs and the Monte Carlo harness.
//!
//! Design 1 draws clustered data with Toeplitz within-cluster dependence and
//! three bands of first-stage strength across clusters. Design 2 draws a
//! linear-in-means outcome on a random geometric network and obtains the
//! inference clusters by spectral clustering. The harness runs the
//! inference methods over replications and tabulates rejection rates.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::alt_inference;
use crate::bootstrap::{ArConfig, Method, TestMode, WaldConfig};
use crate::clustering::{self, EigenOrder, Network};
use crate::dataset::ClusteredDataset;
use crate::error::{Error, Result};
use crate::estimator::{A1Choice, ProfileGrid};
use crate::instruments::{InstrumentMethod, InstrumentRecipe};
use crate::seeding;

/// Cluster sizes `n_j = floor(n exp(r j / J) / sum_k exp(r k / J))` for
/// `j < J`, with the remainder in the last cluster.
pub fn cluster_sizes(n: usize, j: usize, r: f64) -> Result<Vec<usize>> {
    if j == 0 || n < j {
        return Err(Error::InvalidConfig(format!(
            "need n >= J >= 1, got n={n}, J={j}"
        )));
    }
    let denom: f64 = (1..=j).map(|k| (r * k as f64 / j as f64).exp()).sum();
    let mut sizes = Vec::with_capacity(j);
    let mut used = 0usize;
    for k in 1..j {
        let share = (n as f64) * (r * k as f64 / j as f64).exp() / denom;
        let nk = share.floor() as usize;
        if nk == 0 {
            return Err(Error::ZeroSizeCluster { index: k });
        }
        sizes.push(nk);
        used += nk;
    }
    if used >= n {
        return Err(Error::ZeroSizeCluster { index: j });
    }
    sizes.push(n - used);
    Ok(sizes)
}

/// Dense Toeplitz covariance with entries `rho^|s-t|`.
pub fn toeplitz_covariance(rho: f64, m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m, m, |s, t| rho.powi((s as i32 - t as i32).abs()))
}

/// Lower Cholesky factor of the Toeplitz covariance, used to correlate
/// standard normal draws.
fn toeplitz_chol(rho: f64, m: usize) -> DMatrix<f64> {
    toeplitz_covariance(rho, m)
        .cholesky()
        .expect("Toeplitz(rho) with |rho| < 1 is positive definite")
        .l()
}

fn sample_correlated(chol: &DMatrix<f64>, rng: &mut impl Rng) -> DVector<f64> {
    let m = chol.nrows();
    let z = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
    chol * z
}

/// Configuration of the clustered design.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Dgp1Config {
    pub n: usize,
    pub j: usize,
    pub d_z: usize,
    /// Base first-stage strength; the three cluster bands get `pi`, `0`,
    /// and `2 pi`.
    pub pi: f64,
    /// Cluster-size heterogeneity exponent.
    pub r: f64,
    pub seed: u64,
}

impl Default for Dgp1Config {
    fn default() -> Self {
        Self {
            n: 500,
            j: 9,
            d_z: 1,
            pi: 1.0,
            r: 4.0,
            seed: 0,
        }
    }
}

/// Sampler with the per-cluster Cholesky factors precomputed.
pub struct Dgp1Sampler {
    pub config: Dgp1Config,
    pub sizes: Vec<usize>,
    chols: Vec<DMatrix<f64>>,
    band: Vec<f64>,
}

impl Dgp1Sampler {
    pub fn new(config: Dgp1Config) -> Result<Self> {
        if config.j < 3 {
            return Err(Error::InvalidConfig(
                "the three-band strength pattern needs at least three clusters".into(),
            ));
        }
        if config.d_z == 0 {
            return Err(Error::InvalidConfig("d_z must be positive".into()));
        }
        let sizes = cluster_sizes(config.n, config.j, config.r)?;
        let jf = config.j as f64;
        let mut chols = Vec::with_capacity(config.j);
        let mut band = Vec::with_capacity(config.j);
        for (jj, &m) in sizes.iter().enumerate() {
            let j1 = (jj + 1) as f64; // 1-indexed cluster
            let rho = 0.2 + 0.5 * j1 / jf;
            chols.push(toeplitz_chol(rho, m));
            let strength = if j1 <= jf / 3.0 {
                config.pi
            } else if j1 <= 2.0 * jf / 3.0 {
                0.0
            } else {
                2.0 * config.pi
            };
            band.push(strength);
        }
        Ok(Self {
            config,
            sizes,
            chols,
            band,
        })
    }

    /// Cluster band strengths `Pi_j` in cluster order.
    pub fn strengths(&self) -> &[f64] {
        &self.band
    }

    /// One replication. Identical `(config, rep)` produce identical data.
    pub fn generate(&self, rep: u64) -> ClusteredDataset {
        self.generate_full(rep).dataset
    }

    /// One replication together with the structural rank variable, in row
    /// order of the dataset.
    pub fn generate_full(&self, rep: u64) -> Dgp1Draw {
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        let cfg = &self.config;
        let rep_seed = seeding::derive(cfg.seed, "dgp1-rep", rep);
        let n = cfg.n;
        let mut y = Vec::with_capacity(n);
        let mut x = Vec::with_capacity(n);
        let mut w_under = Vec::with_capacity(n);
        let mut z = DMatrix::zeros(n, cfg.d_z);
        let mut labels = Vec::with_capacity(n);
        let mut rank_all = Vec::with_capacity(n);

        let mut row = 0usize;
        for (jj, &m) in self.sizes.iter().enumerate() {
            let chol = &self.chols[jj];
            let strength = self.band[jj];
            let a: Vec<DVector<f64>> = (0..cfg.d_z)
                .map(|k| {
                    let mut rng =
                        seeding::stream(rep_seed, "a", (jj * cfg.d_z + k) as u64);
                    sample_correlated(chol, &mut rng)
                })
                .collect();
            // A single rank variable drives the random coefficient, the
            // outcome disturbance, and the endogenous threshold. That
            // comonotonic structure is what makes the conditional quantile
            // coefficient equal 1 + tau exactly; with two separate
            // disturbances the coefficient would be a convolution and the
            // size targets would not reproduce.
            let mut rng_u = seeding::stream(rep_seed, "u1", jj as u64);
            let u = sample_correlated(chol, &mut rng_u);
            let mut rng_w = seeding::stream(rep_seed, "w", jj as u64);

            for i in 0..m {
                let mut index = 0.1 + 0.5 * (normal.cdf(u[i]) - 0.5);
                for ak in &a {
                    index += strength * (normal.cdf(ak[i]) - 0.5);
                }
                let xi = if index > 0.0 { 1.0 } else { 0.0 };
                for (k, ak) in a.iter().enumerate() {
                    z[(row, k)] = if normal.cdf(ak[i]) > 0.5 { 1.0 } else { 0.0 };
                }
                let wv: f64 = {
                    let g: f64 = rng_w.sample(StandardNormal);
                    0.5 * g * g
                };
                let beta = 1.0 + normal.cdf(u[i]);
                y.push(xi * beta + 0.1f64.sqrt() * u[i]);
                rank_all.push(u[i]);
                x.push(xi);
                w_under.push(wv);
                labels.push(jj as i64);
                row += 1;
            }
        }

        let w = DMatrix::from_fn(n, 2, |i, c| if c == 0 { 1.0 } else { w_under[i] });
        let dataset = ClusteredDataset::new(y, x, w, z, &labels, None)
            .expect("generated data is well-formed");
        Dgp1Draw {
            dataset,
            rank: rank_all,
        }
    }
}

/// A design-1 replication with its structural rank variable.
pub struct Dgp1Draw {
    pub dataset: ClusteredDataset,
    /// The normal variate whose CDF sets the random coefficient; it also
    /// scales the additive disturbance and enters the endogenous threshold.
    pub rank: Vec<f64>,
}

/// The null coefficient of design 1 at quantile `tau`.
pub fn dgp1_beta0(tau: f64) -> f64 {
    1.0 + tau
}

/// The shifted null tested for power in design 1.
pub fn dgp1_beta1(tau: f64) -> f64 {
    0.5 + tau
}

/// Comparison used to threshold pairwise distances into edges. The sparse
/// geometric graph uses `<=`; `>=` reproduces the display as written, which
/// connects almost every pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdjacencyOp {
    #[default]
    Le,
    AsWritten,
}

impl AdjacencyOp {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "le" => Ok(Self::Le),
            "as-written" => Ok(Self::AsWritten),
            other => Err(Error::InvalidConfig(format!(
                "unknown adjacency op `{other}` (expected le | as-written)"
            ))),
        }
    }
}

/// Configuration of the network design.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Dgp2Config {
    pub n: usize,
    /// Number of k-means clusters on the largest component.
    pub l: usize,
    pub seed: u64,
    pub eigens: EigenOrder,
    pub adjacency_op: AdjacencyOp,
}

impl Default for Dgp2Config {
    fn default() -> Self {
        Self {
            n: 500,
            l: 10,
            seed: 0,
            eigens: EigenOrder::default(),
            adjacency_op: AdjacencyOp::default(),
        }
    }
}

pub fn dgp2_delta0(u: f64) -> f64 {
    0.7683 + 0.25 * (u - 0.5)
}

pub fn dgp2_beta(u: f64) -> f64 {
    0.4666 + 0.2 * (u - 0.5)
}

pub fn dgp2_delta1(u: f64) -> f64 {
    0.0834 + 0.1 * (u - 0.5)
}

pub fn dgp2_delta2(u: f64) -> f64 {
    0.1507 + 0.2 * (u - 0.5)
}

/// The null coefficient of design 2 at quantile `tau`.
pub fn dgp2_beta0(tau: f64) -> f64 {
    dgp2_beta(tau)
}

/// The shifted null tested for power in design 2.
pub fn dgp2_beta1(tau: f64) -> f64 {
    0.75 + dgp2_beta(tau)
}

/// Structural diagnostics of one generated network replication.
#[derive(Debug, Clone, serde::Serialize)]
pub struct Dgp2Diagnostics {
    /// `max_i |y_i - beta(U_i) (Ay)_i - rest_i|` over the defining system.
    pub fixed_point_residual: f64,
    /// Empirical correlation of the endogenous variable with the rank
    /// disturbance over all nodes.
    pub corr_x_u: f64,
    /// Number of resampling attempts due to singular systems.
    pub resample_attempts: u32,
    pub n_clusters: usize,
    pub n_kept: usize,
}

/// Output of one design-2 replication.
pub struct Dgp2Draw {
    pub dataset: ClusteredDataset,
    pub network: Network,
    pub diagnostics: Dgp2Diagnostics,
}

/// Row-normalized adjacency: rows of isolated nodes stay zero.
fn row_normalized(net: &Network) -> DMatrix<f64> {
    let n = net.n();
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        let d = net.degree(i);
        if d == 0 {
            continue;
        }
        let w = 1.0 / d as f64;
        for &jn in net.neighbors(i) {
            a[(i, jn as usize)] = w;
        }
    }
    a
}

/// Solves `y = (I - diag(beta) A~)^{-1} (delta0 + diag(delta1) B +
/// diag(delta2) A~ B)`.
fn solve_outcome(
    beta: &DVector<f64>,
    delta0: &DVector<f64>,
    delta1: &DVector<f64>,
    delta2: &DVector<f64>,
    a_norm: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Option<DVector<f64>> {
    let n = b.len();
    let ab = a_norm * b;
    let mut system = -a_norm.clone();
    for i in 0..n {
        for jn in 0..n {
            system[(i, jn)] *= beta[i];
        }
        system[(i, i)] += 1.0;
    }
    let rhs = DVector::from_fn(n, |i, _| delta0[i] + delta1[i] * b[i] + delta2[i] * ab[i]);
    system.lu().solve(&rhs)
}

impl Dgp2Config {
    fn validate(&self) -> Result<()> {
        if self.n < 50 {
            return Err(Error::InvalidConfig("design 2 needs at least 50 nodes".into()));
        }
        if self.l == 0 {
            return Err(Error::InvalidConfig("L must be positive".into()));
        }
        Ok(())
    }

    /// One replication; singular outcome systems are resampled with the next
    /// sub-seed (the attempt count is reported in the diagnostics).
    pub fn generate(&self, rep: u64) -> Result<Dgp2Draw> {
        self.validate()?;
        let rep_seed = seeding::derive(self.seed, "dgp2-rep", rep);
        for attempt in 0..10u32 {
            if let Some(draw) = self.try_generate(rep_seed, attempt)? {
                return Ok(draw);
            }
        }
        Err(Error::SingularSystem { attempt: 10 })
    }

    fn try_generate(&self, rep_seed: u64, attempt: u32) -> Result<Option<Dgp2Draw>> {
        let n = self.n;
        let threshold = (7.0 / (std::f64::consts::PI * n as f64)).sqrt();

        let mut rng_eta = seeding::stream(rep_seed, "eta", attempt as u64);
        let eta: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng_eta.random::<f64>(), rng_eta.random::<f64>()))
            .collect();
        let mut edges = Vec::new();
        for a in 0..n {
            for b in (a + 1)..n {
                let dx = eta[a].0 - eta[b].0;
                let dy = eta[a].1 - eta[b].1;
                let dist = (dx * dx + dy * dy).sqrt();
                let linked = match self.adjacency_op {
                    AdjacencyOp::Le => dist <= threshold,
                    AdjacencyOp::AsWritten => dist >= threshold,
                };
                if linked {
                    edges.push((a as u32, b as u32));
                }
            }
        }
        let network = Network::new(n, &edges)?;

        let mut rng_b = seeding::stream(rep_seed, "b", attempt as u64);
        let b = DVector::from_fn(n, |_, _| {
            if rng_b.random::<bool>() {
                0.0
            } else {
                let e: f64 = rng_b.sample(StandardNormal);
                (-(2.0f64.ln()) + (4.0f64.ln()).sqrt() * e).exp()
            }
        });
        let mut rng_u = seeding::stream(rep_seed, "u", attempt as u64);
        let u = DVector::from_fn(n, |_, _| rng_u.random::<f64>());

        let beta = u.map(dgp2_beta);
        let delta0 = u.map(dgp2_delta0);
        let delta1 = u.map(dgp2_delta1);
        let delta2 = u.map(dgp2_delta2);
        let a_norm = row_normalized(&network);
        let Some(y) = solve_outcome(&beta, &delta0, &delta1, &delta2, &a_norm, &b) else {
            return Ok(None);
        };

        // defining-equation residual
        let ab = &a_norm * &b;
        let ay = &a_norm * &y;
        let mut resid = 0.0f64;
        for i in 0..n {
            let r = y[i] - beta[i] * ay[i] - delta0[i] - delta1[i] * b[i] - delta2[i] * ab[i];
            resid = resid.max(r.abs());
        }

        let x = &a_norm * &y;
        let corr_x_u = crate::linalg::correlation(x.as_slice(), u.as_slice());

        let spectral_seed = seeding::derive(rep_seed, "spectral", attempt as u64);
        let partition =
            clustering::spectral_partition(&network, self.l, spectral_seed, self.eigens)?;

        // keep only labeled nodes
        let kept = partition.labeled_nodes();
        let m = kept.len();
        let zfull = &a_norm * &ab; // A~^2 B
        let mut yk = Vec::with_capacity(m);
        let mut xk = Vec::with_capacity(m);
        let mut labels = Vec::with_capacity(m);
        let mut wk = DMatrix::zeros(m, 3);
        let mut zk = DMatrix::zeros(m, 1);
        for (row, &(node, label)) in kept.iter().enumerate() {
            yk.push(y[node]);
            xk.push(x[node]);
            labels.push(label as i64);
            wk[(row, 0)] = 1.0;
            wk[(row, 1)] = b[node];
            wk[(row, 2)] = ab[node];
            zk[(row, 0)] = zfull[node];
        }
        let dataset = ClusteredDataset::new(yk, xk, wk, zk, &labels, None)?;

        Ok(Some(Dgp2Draw {
            dataset,
            network,
            diagnostics: Dgp2Diagnostics {
                fixed_point_residual: resid,
                corr_x_u,
                resample_attempts: attempt,
                n_clusters: partition.n_clusters,
                n_kept: m,
            },
        }))
    }
}

/// Which hypothesis the harness tests: the true null (size) or the shifted
/// null (power).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Hypothesis {
    H0,
    H1,
}

impl Hypothesis {
    pub fn as_str(&self) -> &'static str {
        match self {
            Hypothesis::H0 => "H0",
            Hypothesis::H1 => "H1",
        }
    }
}

/// Simulation design selector.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub enum DgpChoice {
    One(Dgp1Config),
    Two(Dgp2Config),
}

/// Monte Carlo configuration.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct McConfig {
    pub replications: usize,
    pub bootstrap_draws: usize,
    pub taus: Vec<f64>,
    pub alpha: f64,
    pub methods: Vec<Method>,
    pub hypothesis: Hypothesis,
    /// Profile grid half-width around the tested null.
    pub grid_halfwidth: f64,
    pub grid_step: f64,
    pub instrument: InstrumentRecipe,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            replications: 500,
            bootstrap_draws: 300,
            taus: vec![0.1, 0.25, 0.5, 0.75, 0.9],
            alpha: 0.10,
            methods: vec![
                Method::TCr,
                Method::T,
                Method::Ar,
                Method::TStd,
                Method::Im,
                Method::Crs,
            ],
            hypothesis: Hypothesis::H0,
            grid_halfwidth: 2.0,
            grid_step: 0.01,
            instrument: InstrumentRecipe::new(InstrumentMethod::NonparametricFull),
        }
    }
}

/// One cell of the rejection table.
#[derive(Debug, Clone, serde::Serialize)]
pub struct McCell {
    pub method: Method,
    pub tau: f64,
    pub hypothesis: Hypothesis,
    pub rejection_rate: f64,
    pub successes: usize,
    pub failures: usize,
}

/// Rejection-rate table over `(method, tau)`.
#[derive(Debug, Clone, serde::Serialize)]
pub struct McTable {
    pub cells: Vec<McCell>,
    pub replications: usize,
}

impl McTable {
    pub fn rate(&self, method: Method, tau: f64, hyp: Hypothesis) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.tau == tau && c.hypothesis == hyp)
            .map(|c| c.rejection_rate)
    }
}

/// The tested null value for a design at quantile `tau`.
pub fn null_value(dgp: &DgpChoice, hyp: Hypothesis, tau: f64) -> f64 {
    match (dgp, hyp) {
        (DgpChoice::One(_), Hypothesis::H0) => dgp1_beta0(tau),
        (DgpChoice::One(_), Hypothesis::H1) => dgp1_beta1(tau),
        (DgpChoice::Two(_), Hypothesis::H0) => dgp2_beta0(tau),
        (DgpChoice::Two(_), Hypothesis::H1) => dgp2_beta1(tau),
    }
}

struct RepOutcome {
    /// `Some(reject)` per (tau, method); `None` records a failure.
    decisions: Vec<Vec<Option<bool>>>,
}

/// Runs the harness: replications in parallel, aggregation in replication
/// order. Per-replication failures surface as failure counts, never as
/// silently dropped cells.
pub fn monte_carlo(dgp: &DgpChoice, mc: &McConfig) -> Result<McTable> {
    if mc.replications == 0 || mc.bootstrap_draws == 0 || mc.taus.is_empty() {
        return Err(Error::InvalidConfig("replications, draws, and taus must be nonempty".into()));
    }
    let sampler = match dgp {
        DgpChoice::One(cfg) => Some(Dgp1Sampler::new(cfg.clone())?),
        DgpChoice::Two(_) => None,
    };

    let outcomes: Vec<RepOutcome> = (0..mc.replications as u64)
        .into_par_iter()
        .map(|rep| run_replication(dgp, mc, sampler.as_ref(), rep))
        .collect::<Result<Vec<_>>>()?;

    let mut cells = Vec::new();
    for (ti, &tau) in mc.taus.iter().enumerate() {
        for (mi, &method) in mc.methods.iter().enumerate() {
            let mut successes = 0usize;
            let mut rejections = 0usize;
            let mut failures = 0usize;
            for o in &outcomes {
                match o.decisions[ti][mi] {
                    Some(reject) => {
                        successes += 1;
                        if reject {
                            rejections += 1;
                        }
                    }
                    None => failures += 1,
                }
            }
            cells.push(McCell {
                method,
                tau,
                hypothesis: mc.hypothesis,
                rejection_rate: if successes > 0 {
                    rejections as f64 / successes as f64
                } else {
                    f64::NAN
                },
                successes,
                failures,
            });
        }
    }
    Ok(McTable {
        cells,
        replications: mc.replications,
    })
}

fn run_replication(
    dgp: &DgpChoice,
    mc: &McConfig,
    sampler: Option<&Dgp1Sampler>,
    rep: u64,
) -> Result<RepOutcome> {
    let ds = match dgp {
        DgpChoice::One(_) => sampler.expect("sampler for design 1").generate(rep),
        DgpChoice::Two(cfg) => cfg.generate(rep)?.dataset,
    };
    let master = match dgp {
        DgpChoice::One(cfg) => cfg.seed,
        DgpChoice::Two(cfg) => cfg.seed,
    };
    let rep_seed = seeding::derive(master, "mc-rep", rep);

    let wants_wald = mc
        .methods
        .iter()
        .any(|m| matches!(m, Method::T | Method::TCr | Method::TStd));
    let wants_ar = mc.methods.iter().any(|m| matches!(m, Method::Ar | Method::ArCr));
    let wants_group = mc.methods.iter().any(|m| matches!(m, Method::Im | Method::Crs));

    let mut decisions = vec![vec![None; mc.methods.len()]; mc.taus.len()];
    for (ti, &tau) in mc.taus.iter().enumerate() {
        let b0 = null_value(dgp, mc.hypothesis, tau);
        let grid = ProfileGrid::new(
            b0 - mc.grid_halfwidth,
            b0 + mc.grid_halfwidth,
            mc.grid_step,
        )?;
        let inst = match crate::instruments::build(&ds, &mc.instrument, &[tau], &[b0]) {
            Ok(i) => i,
            Err(_) => continue, // all methods fail for this tau
        };

        let wald = if wants_wald {
            let mut cfg = WaldConfig::new(grid.clone());
            cfg.alpha = mc.alpha;
            cfg.mode = TestMode::Sample {
                draws: mc.bootstrap_draws,
            };
            cfg.seed = seeding::derive(rep_seed, "wald", ti as u64);
            crate::bootstrap::wald_pass(&ds, &inst, &[b0], &cfg).ok()
        } else {
            None
        };
        let ar = if wants_ar {
            let mut cfg = ArConfig::new();
            cfg.alpha = mc.alpha;
            cfg.mode = TestMode::Sample {
                draws: mc.bootstrap_draws,
            };
            cfg.seed = seeding::derive(rep_seed, "ar", ti as u64);
            crate::bootstrap::ar_pass(&ds, &inst, &[b0], &cfg).ok()
        } else {
            None
        };
        let group = if wants_group {
            Some(alt_inference::group_estimates(
                &ds,
                &mc.instrument,
                &grid,
                &A1Choice::Identity,
                tau,
                b0,
            ))
        } else {
            None
        };

        for (mi, &method) in mc.methods.iter().enumerate() {
            let decision = match method {
                Method::T => wald.as_ref().and_then(|p| p.t_test().ok()),
                Method::TCr => wald.as_ref().and_then(|p| p.t_cr_test().ok()),
                Method::TStd => {
                    let mut cfg = WaldConfig::new(grid.clone());
                    cfg.alpha = mc.alpha;
                    alt_inference::t_std_test(
                        &ds,
                        &inst,
                        &[b0],
                        &cfg,
                        alt_inference::TStdCritical::StudentT,
                    )
                    .ok()
                }
                Method::Ar => ar.as_ref().and_then(|p| p.ar_test().ok()),
                Method::ArCr => ar.as_ref().and_then(|p| p.ar_cr_test().ok()),
                Method::Im => group
                    .as_ref()
                    .and_then(|g| alt_inference::im_test(g, b0, mc.alpha).ok()),
                Method::Crs => group
                    .as_ref()
                    .and_then(|g| alt_inference::crs_test(g, b0, mc.alpha).ok()),
            };
            decisions[ti][mi] = decision.map(|r| r.reject);
        }
    }
    Ok(RepOutcome { decisions })
}
