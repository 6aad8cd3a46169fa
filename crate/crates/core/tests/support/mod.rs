//! Shared test oracles, independent of the implementation paths they check.

use nalgebra::{DMatrix, DVector};

/// Brute-force quantile-regression oracle: enumerate every p-subset of
/// observations, fit it exactly, evaluate the full shifted objective, and
/// return the best vertex. Exact for any bounded instance because some
/// optimum interpolates p observations.
///
/// Returns `(coefficients, objective)` or `None` if no subset is invertible.
pub fn interpolating_subset_oracle(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    w: &DVector<f64>,
    tau: f64,
    shift: &DVector<f64>,
) -> Option<(DVector<f64>, f64)> {
    let n = x.nrows();
    let p = x.ncols();
    let mut best: Option<(DVector<f64>, f64)> = None;
    let mut subset = vec![0usize; p];
    enumerate_subsets(n, p, &mut subset, 0, 0, &mut |rows: &[usize]| {
        let xb = DMatrix::from_fn(p, p, |r, c| x[(rows[r], c)]);
        let yb = DVector::from_fn(p, |r, _| y[rows[r]]);
        let Some(inv) = xb.try_inverse() else { return };
        let eta = inv * yb;
        let mut obj = -shift.dot(&eta);
        for i in 0..n {
            let fit = x.row(i).transpose().dot(&eta);
            obj += rho(y[i] - fit, tau) * w[i];
        }
        match &best {
            Some((_, b)) if *b <= obj => {}
            _ => best = Some((eta, obj)),
        }
    });
    best
}

fn rho(u: f64, tau: f64) -> f64 {
    u * (tau - if u <= 0.0 { 1.0 } else { 0.0 })
}

fn enumerate_subsets(
    n: usize,
    p: usize,
    subset: &mut Vec<usize>,
    depth: usize,
    start: usize,
    f: &mut impl FnMut(&[usize]),
) {
    if depth == p {
        f(subset);
        return;
    }
    for i in start..n {
        subset[depth] = i;
        enumerate_subsets(n, p, subset, depth + 1, i + 1, f);
    }
}

/// Deterministic pseudo-random stream for building test fixtures without
/// depending on the crate's own seeding utilities.
pub struct TestRng(u64);

impl TestRng {
    pub fn new(seed: u64) -> Self {
        TestRng(seed.wrapping_add(0x9e37_79b9_7f4a_7c15))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform().max(1e-300);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}
