//! One-way linear mixed model `y = alpha_j + beta x + e` with
//! `alpha_j ~ N(alpha, s_a^2)` and `e ~ N(0, s_j^2)`.
//!
//! The combined estimator treats IPD studies through their marginal
//! covariance `H_j = s_a^2 11' + s_j^2 I` and AD studies through the variance
//! of their effect estimate, `s_j^2 / (n_j pi_j (1 - pi_j))`. `H_j` is never
//! formed; its inverse is applied through the rank-one identity
//! `H_j^-1 = (I - c_j 11') / s_j^2` with `c_j = s_a^2 / (s_j^2 + n_j s_a^2)`.

use log::warn;
use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::data::{AdStudy, IpdStudy, OutcomeKind, Partition, StudyCollection};
use crate::error::{Error, Result};
use crate::optim::{nelder_mead, SimplexOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorVariance {
    Pooled(f64),
    PerStudy(Vec<f64>),
}

/// Between-study variance of the intercepts and within-study error variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    sigma_alpha_sq: f64,
    sigma_sq: ErrorVariance,
}

impl VarianceComponents {
    pub fn pooled(sigma_alpha_sq: f64, sigma_sq: f64) -> Result<Self> {
        Self::new(sigma_alpha_sq, ErrorVariance::Pooled(sigma_sq))
    }

    pub fn per_study(sigma_alpha_sq: f64, sigma_sq: Vec<f64>) -> Result<Self> {
        Self::new(sigma_alpha_sq, ErrorVariance::PerStudy(sigma_sq))
    }

    pub fn new(sigma_alpha_sq: f64, sigma_sq: ErrorVariance) -> Result<Self> {
        if !(sigma_alpha_sq >= 0.0) || !sigma_alpha_sq.is_finite() {
            return Err(Error::InvalidInput(format!(
                "between-study variance must be nonnegative, got {sigma_alpha_sq}"
            )));
        }
        let ok = |v: &f64| *v > 0.0 && v.is_finite();
        let valid = match &sigma_sq {
            ErrorVariance::Pooled(v) => ok(v),
            ErrorVariance::PerStudy(vs) => vs.iter().all(ok),
        };
        if !valid {
            return Err(Error::InvalidInput(
                "error variances must be positive".into(),
            ));
        }
        Ok(Self {
            sigma_alpha_sq,
            sigma_sq,
        })
    }

    pub fn sigma_alpha_sq(&self) -> f64 {
        self.sigma_alpha_sq
    }

    pub fn error_variance(&self) -> &ErrorVariance {
        &self.sigma_sq
    }

    /// Error variance of study `j`.
    pub fn sigma_sq(&self, j: usize) -> f64 {
        match &self.sigma_sq {
            ErrorVariance::Pooled(v) => *v,
            ErrorVariance::PerStudy(vs) => vs[j],
        }
    }

    /// `a_j = 1 + n_j s_a^2 / s_j^2`.
    pub fn a(&self, j: usize, n: usize) -> f64 {
        1.0 + n as f64 * self.sigma_alpha_sq / self.sigma_sq(j)
    }

    pub(crate) fn check(&self, k: usize) -> Result<()> {
        if let ErrorVariance::PerStudy(vs) = &self.sigma_sq {
            if vs.len() != k {
                return Err(Error::InvalidInput(format!(
                    "{} error variances supplied for {k} studies",
                    vs.len()
                )));
            }
        }
        Ok(())
    }
}

fn check_design(n: &[usize], pi: &[f64], vc: &VarianceComponents) -> Result<()> {
    if n.is_empty() {
        return Err(Error::InvalidInput("empty study set".into()));
    }
    if n.len() != pi.len() {
        return Err(Error::InvalidInput(
            "sample sizes and proportions differ in length".into(),
        ));
    }
    if let Some(j) = n.iter().position(|&nj| nj == 0) {
        return Err(Error::InvalidInput(format!(
            "study {j} has no participants"
        )));
    }
    if let Some(j) = pi.iter().position(|&p| !(p > 0.0 && p < 1.0)) {
        return Err(Error::InvalidInput(format!(
            "study {j}: treatment proportion {} outside (0, 1)",
            pi[j]
        )));
    }
    vc.check(n.len())
}

/// Precision of an AD effect estimate, `n pi (1 - pi) / s^2`.
fn ad_precision(n: usize, pi: f64, sigma_sq: f64) -> f64 {
    n as f64 * pi * (1.0 - pi) / sigma_sq
}

/// Variance of the combined estimator of `beta` with the studies in `ipd`
/// analysed as IPD and the rest as AD:
///
/// `[ sum_{S1} w_j (pi_j - pi~)^2 + sum_all n_j pi_j (1 - pi_j) / s_j^2 ]^-1`
///
/// with `w_j = n_j / (s_j^2 a_j)` and `pi~` the `w`-weighted mean over `S1`.
pub fn variance_combined(
    n: &[usize],
    pi: &[f64],
    vc: &VarianceComponents,
    ipd: &[usize],
) -> Result<f64> {
    check_design(n, pi, vc)?;
    let base: f64 = (0..n.len())
        .map(|j| ad_precision(n[j], pi[j], vc.sigma_sq(j)))
        .sum();
    let mut deviation = 0.0;
    if !ipd.is_empty() {
        if let Some(&j) = ipd.iter().find(|&&j| j >= n.len()) {
            return Err(Error::InvalidInput(format!("study index {j} out of range")));
        }
        let w: Vec<f64> = ipd
            .iter()
            .map(|&j| n[j] as f64 / (vc.sigma_sq(j) * vc.a(j, n[j])))
            .collect();
        let total: f64 = w.iter().sum();
        let mean = ipd.iter().zip(&w).map(|(&j, wj)| wj * pi[j]).sum::<f64>() / total;
        deviation = ipd
            .iter()
            .zip(&w)
            .map(|(&j, wj)| wj * (pi[j] - mean).powi(2))
            .sum();
    }
    Ok(1.0 / (deviation + base))
}

/// Variance of the all-IPD (BLUE) estimator.
pub fn variance_ipd_ma(n: &[usize], pi: &[f64], vc: &VarianceComponents) -> Result<f64> {
    let all: Vec<usize> = (0..n.len()).collect();
    variance_combined(n, pi, vc, &all)
}

/// Variance of the inverse-variance pooled estimator using AD only.
pub fn variance_ad_ma(n: &[usize], pi: &[f64], vc: &VarianceComponents) -> Result<f64> {
    variance_combined(n, pi, vc, &[])
}

/// `v(IPD-MA) / v(IPD-AD-MA)` for the given partition.
pub fn relative_efficiency(
    n: &[usize],
    pi: &[f64],
    vc: &VarianceComponents,
    partition: &Partition,
) -> Result<f64> {
    if partition.k() != n.len() {
        return Err(Error::InvalidInput(
            "partition does not cover the study set".into(),
        ));
    }
    let best = variance_ipd_ma(n, pi, vc)?;
    let combined = variance_combined(n, pi, vc, partition.ipd())?;
    Ok(best / combined)
}

/// GLS estimate of `(alpha, beta)` and its covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct LmmEstimate {
    pub alpha_hat: f64,
    pub beta_hat: f64,
    /// Covariance of `(alpha_hat, beta_hat)`, in that order.
    pub covariance: Matrix2<f64>,
    pub partition: Partition,
    pub variance_beta: f64,
}

/// Pooled estimate of `beta` alone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaEstimate {
    pub beta_hat: f64,
    pub variance: f64,
}

/// Sufficient statistics of one IPD study for the model with intercept and
/// treatment indicator.
#[derive(Debug, Clone, Copy)]
struct IpdStats {
    n: f64,
    n_t: f64,
    sum_y: f64,
    sum_y_t: f64,
    sum_yy: f64,
}

impl IpdStats {
    fn new(study: &IpdStudy) -> Self {
        let mut s = IpdStats {
            n: study.n() as f64,
            n_t: study.n_treated() as f64,
            sum_y: 0.0,
            sum_y_t: 0.0,
            sum_yy: 0.0,
        };
        for (&y, &t) in study.responses().iter().zip(study.treatment()) {
            s.sum_y += y;
            s.sum_yy += y * y;
            if t {
                s.sum_y_t += y;
            }
        }
        s
    }

    /// `U_j' H_j^-1 U_j` and `U_j' H_j^-1 y_j` for `U_j = [1, x]`.
    fn normal_equations(&self, sigma_sq: f64, sigma_alpha_sq: f64) -> (Matrix2<f64>, Vector2<f64>) {
        let c = sigma_alpha_sq / (sigma_sq + self.n * sigma_alpha_sq);
        let one_one = self.n - c * self.n * self.n;
        let one_x = self.n_t - c * self.n * self.n_t;
        let x_x = self.n_t - c * self.n_t * self.n_t;
        let one_y = self.sum_y - c * self.n * self.sum_y;
        let x_y = self.sum_y_t - c * self.n_t * self.sum_y;
        (
            Matrix2::new(one_one, one_x, one_x, x_x) / sigma_sq,
            Vector2::new(one_y, x_y) / sigma_sq,
        )
    }

    /// Marginal log-likelihood contribution, constants dropped.
    fn loglik(&self, alpha: f64, beta: f64, sigma_sq: f64, sigma_alpha_sq: f64) -> f64 {
        let rr = self.sum_yy - 2.0 * alpha * self.sum_y - 2.0 * beta * self.sum_y_t
            + self.n * alpha * alpha
            + 2.0 * alpha * beta * self.n_t
            + beta * beta * self.n_t;
        let one_r = self.sum_y - self.n * alpha - self.n_t * beta;
        let total = sigma_sq + self.n * sigma_alpha_sq;
        let c = sigma_alpha_sq / total;
        let quad = (rr - c * one_r * one_r) / sigma_sq;
        -0.5 * ((self.n - 1.0) * sigma_sq.ln() + total.ln() + quad)
    }
}

fn solve_spd(
    a: Matrix2<f64>,
    b: Vector2<f64>,
    what: &'static str,
) -> Result<(Vector2<f64>, Matrix2<f64>)> {
    let chol = a.cholesky().ok_or(Error::Singular(what))?;
    Ok((chol.solve(&b), chol.inverse()))
}

/// Combined GLS estimator of `(alpha, beta)` with variance components held
/// fixed. IPD studies enter through their raw responses; AD studies (or IPD
/// studies placed in the AD set, which are summarized first) through their
/// effect estimate with variance `s_j^2 / (n_j pi_j (1 - pi_j))`.
pub fn combined_estimate_lmm(
    collection: &StudyCollection,
    partition: &Partition,
    vc: &VarianceComponents,
) -> Result<LmmEstimate> {
    let k = collection.len();
    if partition.k() != k {
        return Err(Error::InvalidInput(
            "partition does not cover the study set".into(),
        ));
    }
    vc.check(k)?;
    if partition.k1() == 0 {
        return Err(Error::NotEstimable(
            "the intercept is not identified without IPD studies; pool the AD alone instead".into(),
        ));
    }
    let mut a = Matrix2::zeros();
    let mut b = Vector2::zeros();
    for &j in partition.ipd() {
        let study = collection.study(j);
        let ipd = study.ipd.as_ref().ok_or_else(|| {
            Error::InvalidInput(format!(
                "study `{}` is in the IPD set but has no IPD",
                study.id
            ))
        })?;
        let (aj, bj) = IpdStats::new(ipd).normal_equations(vc.sigma_sq(j), vc.sigma_alpha_sq());
        a += aj;
        b += bj;
    }
    for &j in partition.ad() {
        let ad = collection.ad_or_summary(j)?;
        let precision = ad_precision(ad.n() as usize, ad.proportion(), vc.sigma_sq(j));
        a[(1, 1)] += precision;
        b[1] += precision * ad.beta_hat();
    }
    let (theta, cov) = solve_spd(a, b, "combined normal equations")?;
    Ok(LmmEstimate {
        alpha_hat: theta[0],
        beta_hat: theta[1],
        covariance: cov,
        partition: partition.clone(),
        variance_beta: cov[(1, 1)],
    })
}

/// Inverse-variance pooled estimate of `beta` from the AD of every study,
/// with study variances `s_j^2 / (n_j pi_j (1 - pi_j))`.
pub fn ad_ma_estimate(
    collection: &StudyCollection,
    vc: &VarianceComponents,
) -> Result<BetaEstimate> {
    vc.check(collection.len())?;
    if collection.is_empty() {
        return Err(Error::InvalidInput("empty study set".into()));
    }
    let mut weight = 0.0;
    let mut weighted = 0.0;
    for j in 0..collection.len() {
        let ad = collection.ad_or_summary(j)?;
        let w = ad_precision(ad.n() as usize, ad.proportion(), vc.sigma_sq(j));
        weight += w;
        weighted += w * ad.beta_hat();
    }
    Ok(BetaEstimate {
        beta_hat: weighted / weight,
        variance: 1.0 / weight,
    })
}

/// Recovers the error variance of a study from its AD:
/// `s_j^2 = v(beta_j) n_j pi_j (1 - pi_j)`.
pub fn estimate_sigma_j(ad: &AdStudy) -> f64 {
    let n = ad.n() as f64;
    let pi = ad.proportion();
    ad.var_hat() * n * pi * (1.0 - pi)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PooledSigma {
    /// Degrees-of-freedom weighted pool of the per-study error variances.
    pub sigma_sq: f64,
    /// Bartlett statistic for equality of the study variances.
    pub statistic: f64,
    pub df: f64,
    pub p_value: f64,
}

impl PooledSigma {
    /// Whether homogeneity is rejected at the 5% level.
    pub fn rejects_homogeneity(&self) -> bool {
        self.p_value < 0.05
    }
}

/// Pools the AD-derived error variances (each with `n_j - 2` degrees of
/// freedom) and runs Bartlett's homogeneity test. The test result is only
/// reported; callers decide whether to use the pool.
pub fn pooled_sigma(ads: &[AdStudy]) -> Result<PooledSigma> {
    if ads.len() < 2 {
        return Err(Error::InvalidInput(
            "pooling needs at least 2 studies".into(),
        ));
    }
    let mut df_total = 0.0;
    let mut ss_total = 0.0;
    let mut log_sum = 0.0;
    let mut inv_df = 0.0;
    for ad in ads {
        let df = ad.n() as f64 - 2.0;
        if df < 1.0 {
            return Err(Error::study(
                ad.id(),
                "needs at least 3 participants to pool its variance",
            ));
        }
        let s2 = estimate_sigma_j(ad);
        df_total += df;
        ss_total += df * s2;
        log_sum += df * s2.ln();
        inv_df += 1.0 / df;
    }
    let pooled = ss_total / df_total;
    let k = ads.len() as f64;
    let correction = 1.0 + (inv_df - 1.0 / df_total) / (3.0 * (k - 1.0));
    let statistic = ((df_total * pooled.ln() - log_sum) / correction).max(0.0);
    let chi = ChiSquared::new(k - 1.0).map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok(PooledSigma {
        sigma_sq: pooled,
        statistic,
        df: k - 1.0,
        p_value: 1.0 - chi.cdf(statistic),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SigmaAlphaEstimate {
    pub sigma_alpha_sq: f64,
    /// True when the maximum sat on the boundary and was set to 0.
    pub truncated: bool,
    pub loglik: f64,
    pub iterations: usize,
}

/// Iteration cap of the simplex search used by [`estimate_sigma_alpha`].
pub const SIGMA_ALPHA_MAX_ITER: usize = 20_000;

/// Maximum-likelihood estimate of the between-study variance from pilot IPD
/// studies. Continuous outcomes maximize the model likelihood over
/// `(s_a^2, s_1^2..s_m^2)` with `(alpha, beta)` profiled out by GLS; binary
/// outcomes fit the logistic random-effects model and report the intercept
/// variance.
pub fn estimate_sigma_alpha(pilots: &[IpdStudy], kind: OutcomeKind) -> Result<SigmaAlphaEstimate> {
    if pilots.len() < 2 {
        return Err(Error::InvalidInput(
            "at least 2 pilot studies are required".into(),
        ));
    }
    match kind {
        OutcomeKind::Continuous => estimate_sigma_alpha_continuous(pilots),
        OutcomeKind::Binary => crate::glmm::estimate_sigma_alpha_logistic(pilots),
    }
}

fn estimate_sigma_alpha_continuous(pilots: &[IpdStudy]) -> Result<SigmaAlphaEstimate> {
    let stats: Vec<IpdStats> = pilots.iter().map(IpdStats::new).collect();

    // within-arm variances as starting values
    let mut init = Vec::with_capacity(pilots.len() + 1);
    let mut s2_init = Vec::with_capacity(pilots.len());
    for p in pilots {
        let (t, c) = p.arms();
        let ss = |xs: &[f64]| {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x - m).powi(2)).sum::<f64>()
        };
        let df = (p.n() as f64 - 2.0).max(1.0);
        let s2 = ((ss(&t) + ss(&c)) / df).max(1e-8);
        s2_init.push(s2);
    }
    let mean_s2 = s2_init.iter().sum::<f64>() / s2_init.len() as f64;
    init.push((0.1 * mean_s2).sqrt());
    init.extend(s2_init.iter().map(|v| v.ln()));

    let negloglik = |theta: &[f64]| -> f64 {
        let sa = theta[0] * theta[0];
        let s2: Vec<f64> = theta[1..].iter().map(|t| t.exp()).collect();
        let mut a = Matrix2::zeros();
        let mut b = Vector2::zeros();
        for (st, &v) in stats.iter().zip(&s2) {
            let (aj, bj) = st.normal_equations(v, sa);
            a += aj;
            b += bj;
        }
        let Some(chol) = a.cholesky() else {
            return f64::INFINITY;
        };
        let theta_hat = chol.solve(&b);
        -stats
            .iter()
            .zip(&s2)
            .map(|(st, &v)| st.loglik(theta_hat[0], theta_hat[1], v, sa))
            .sum::<f64>()
    };

    let opts = SimplexOptions {
        diameter_tol: 1e-9,
        max_iter: SIGMA_ALPHA_MAX_ITER,
        initial_step: 0.3,
    };
    let mut best = nelder_mead(negloglik, &init, opts);
    let mut iterations = best.iterations;
    // restart from the optimum to escape premature collapse of the simplex
    let restart = nelder_mead(negloglik, &best.x, opts);
    iterations += restart.iterations;
    if restart.value <= best.value {
        best = restart;
    }
    if !best.converged {
        return Err(Error::NoConvergence {
            what: "between-study variance search",
            iterations,
        });
    }
    let raw = best.x[0] * best.x[0];
    let truncated = raw < 1e-10 * mean_s2;
    if truncated {
        warn!("between-study variance estimate is on the boundary; truncated at 0");
    }
    Ok(SigmaAlphaEstimate {
        sigma_alpha_sq: if truncated { 0.0 } else { raw },
        truncated,
        loglik: -best.value,
        iterations,
    })
}
