//! Generalized linear mixed model aggregation for binary outcomes.
//!
//! Study `j` has a treatment effect `beta_j` and intercept `alpha_j` drawn from
//! a bivariate normal with mean `(beta, alpha)` and covariance `Sigma`. IPD
//! studies enter through a Laplace (normal) approximation around their own
//! MLE, with precision `Delta_j = (Sigma + I_j^-1)^-1`; AD studies enter through
//! their published effect with variance `V_j + Sigma_bb`. All 2-vectors and
//! 2x2 matrices are ordered `(beta, alpha)`.

use log::warn;
use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::data::{AdStudy, IpdStudy, OutcomeKind, Partition, StudyCollection};
use crate::error::{Error, Result};
use crate::lmm::SigmaAlphaEstimate;
use crate::optim::{nelder_mead, SimplexOptions};

/// Coefficients beyond this magnitude during Newton steps signal separation.
pub const SEPARATION_LIMIT: f64 = 10.0;
const NEWTON_MAX_ITER: usize = 100;
/// Variances below this are reported as boundary solutions.
pub const BOUNDARY_TOL: f64 = 1e-6;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic information for `(beta, alpha)` with treated success rate `p1`
/// on `n_t` participants and control rate `p0` on `n_c`.
fn information(p1: f64, p0: f64, n_t: f64, n_c: f64) -> Matrix2<f64> {
    let a = n_t * p1 * (1.0 - p1);
    let b = n_c * p0 * (1.0 - p0);
    Matrix2::new(a, a, a, a + b)
}

/// Per-study logistic fit: MLE and observed information at the MLE.
#[derive(Debug, Clone, PartialEq)]
pub struct GlmmStudyFit {
    pub id: String,
    pub beta_hat: f64,
    pub alpha_hat: f64,
    pub info: Matrix2<f64>,
    pub iterations: usize,
}

impl GlmmStudyFit {
    /// A fit implied by known arm rates, as if the MLE landed on them exactly.
    pub fn from_rates(id: impl Into<String>, p1: f64, p0: f64, n_t: u64, n_c: u64) -> Result<Self> {
        let id = id.into();
        if !(p1 > 0.0 && p1 < 1.0 && p0 > 0.0 && p0 < 1.0) {
            return Err(Error::study(&id, "arm rates must lie in (0, 1)"));
        }
        if n_t == 0 || n_c == 0 {
            return Err(Error::study(&id, "single-arm study"));
        }
        let logit = |p: f64| (p / (1.0 - p)).ln();
        Ok(Self {
            id,
            beta_hat: logit(p1) - logit(p0),
            alpha_hat: logit(p0),
            info: information(p1, p0, n_t as f64, n_c as f64),
            iterations: 0,
        })
    }

    pub fn theta(&self) -> Vector2<f64> {
        Vector2::new(self.beta_hat, self.alpha_hat)
    }

    /// Inverse information.
    pub fn covariance(&self) -> Result<Matrix2<f64>> {
        self.info
            .try_inverse()
            .ok_or(Error::Singular("study information"))
    }

    pub fn variance_beta(&self) -> Result<f64> {
        Ok(self.covariance()?[(0, 0)])
    }
}

/// Log-likelihood of the intercept + treatment logistic model.
pub fn logistic_loglik(study: &IpdStudy, beta: f64, alpha: f64) -> f64 {
    let (y1, y0) = study.case_counts();
    let (n1, n0) = (study.n_treated() as f64, study.n_control() as f64);
    let (y1, y0) = (y1 as f64, y0 as f64);
    let eta1 = alpha + beta;
    y1 * eta1 - n1 * softplus(eta1) + y0 * alpha - n0 * softplus(alpha)
}

/// Newton-Raphson MLE of `logit P(y = 1) = alpha + beta x` with step halving.
pub fn fit_study_logistic(study: &IpdStudy) -> Result<GlmmStudyFit> {
    let (y1, y0) = study.case_counts();
    let (n1, n0) = (study.n_treated() as u64, study.n_control() as u64);
    for (arm, y, n) in [("treated", y1, n1), ("control", y0, n0)] {
        if y == 0 || y == n {
            let outcome = if y == 0 { "no events" } else { "only events" };
            return Err(Error::Separation {
                study: study.id().to_string(),
                detail: format!("{arm} arm has {outcome}"),
            });
        }
    }
    let (y1f, y0f, n1f, n0f) = (y1 as f64, y0 as f64, n1 as f64, n0 as f64);
    // the score is a difference of counts, so its rounding floor scales with n
    let tol = 1e-10 * (n1f + n0f).max(1.0);

    let mut theta = Vector2::zeros();
    let mut ll = logistic_loglik(study, 0.0, 0.0);
    for iteration in 0..=NEWTON_MAX_ITER {
        let p1 = sigmoid(theta[1] + theta[0]);
        let p0 = sigmoid(theta[1]);
        let r1 = y1f - n1f * p1;
        let grad = Vector2::new(r1, r1 + y0f - n0f * p0);
        let info = information(p1, p0, n1f, n0f);
        if grad.norm() < tol {
            return Ok(GlmmStudyFit {
                id: study.id().to_string(),
                beta_hat: theta[0],
                alpha_hat: theta[1],
                info,
                iterations: iteration,
            });
        }
        if iteration == NEWTON_MAX_ITER {
            break;
        }
        let step = info
            .try_inverse()
            .ok_or(Error::Singular("logistic information"))?
            * grad;
        let mut scale = 1.0;
        loop {
            let cand = theta + step * scale;
            let cand_ll = logistic_loglik(study, cand[0], cand[1]);
            if cand_ll >= ll - 1e-12 * ll.abs() || scale < 1e-10 {
                theta = cand;
                ll = cand_ll;
                break;
            }
            scale *= 0.5;
        }
        if theta.iter().any(|c| c.abs() > SEPARATION_LIMIT) {
            return Err(Error::Separation {
                study: study.id().to_string(),
                detail: format!("coefficient exceeded {SEPARATION_LIMIT} in magnitude"),
            });
        }
    }
    Err(Error::NoConvergence {
        what: "logistic Newton-Raphson",
        iterations: NEWTON_MAX_ITER,
    })
}

/// Covariance of the study-level random effects `(beta_j, alpha_j)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomEffectCov {
    pub bb: f64,
    pub ba: f64,
    pub aa: f64,
}

impl RandomEffectCov {
    pub fn new(bb: f64, ba: f64, aa: f64) -> Result<Self> {
        let cov = Self { bb, ba, aa };
        if ![bb, ba, aa].iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidInput(
                "random-effect covariance must be finite".into(),
            ));
        }
        let eig = cov.matrix().symmetric_eigenvalues();
        if eig.min() < -1e-10 {
            return Err(Error::InvalidInput(
                "random-effect covariance is not positive semidefinite".into(),
            ));
        }
        Ok(cov)
    }

    pub fn zero() -> Self {
        Self {
            bb: 0.0,
            ba: 0.0,
            aa: 0.0,
        }
    }

    pub fn independent(bb: f64, aa: f64) -> Result<Self> {
        Self::new(bb, 0.0, aa)
    }

    pub fn matrix(&self) -> Matrix2<f64> {
        Matrix2::new(self.bb, self.ba, self.ba, self.aa)
    }

    /// `Sigma = L L'` with `L = [[e^t0, 0], [t1, e^t2]]`.
    pub fn from_log_cholesky(t: &[f64]) -> Self {
        let (l00, l10, l11) = (t[0].exp(), t[1], t[2].exp());
        Self {
            bb: l00 * l00,
            ba: l00 * l10,
            aa: l10 * l10 + l11 * l11,
        }
    }

    /// Inverse of [`Self::from_log_cholesky`]; zero variances are floored at `floor`.
    pub fn to_log_cholesky(&self, floor: f64) -> [f64; 3] {
        let bb = self.bb.max(floor);
        let l00 = bb.sqrt();
        let l10 = self.ba / l00;
        let l11 = (self.aa - l10 * l10).max(floor).sqrt();
        [l00.ln(), l10, l11.ln()]
    }

    fn on_boundary(&self, with_alpha: bool) -> bool {
        self.bb < BOUNDARY_TOL || (with_alpha && self.aa < BOUNDARY_TOL)
    }
}

/// IPD precision block `(Sigma + I^-1)^-1`.
pub fn laplace_block(fit: &GlmmStudyFit, sigma: &RandomEffectCov) -> Result<Matrix2<f64>> {
    (sigma.matrix() + fit.covariance()?)
        .try_inverse()
        .ok_or(Error::Singular("Laplace block"))
}

/// AD precision block: `(Sigma_bb + V)^-1` in the `beta` slot, zero elsewhere.
pub fn ad_block(ad: &AdStudy, sigma_bb: f64) -> Matrix2<f64> {
    Matrix2::new(1.0 / (sigma_bb + ad.var_hat()), 0.0, 0.0, 0.0)
}

fn check_inputs(fits: &[GlmmStudyFit], ads: &[AdStudy]) -> Result<()> {
    if fits.is_empty() && ads.is_empty() {
        return Err(Error::NotEstimable("no studies".into()));
    }
    Ok(())
}

/// Summed precision of all studies at `sigma`.
pub fn combined_precision(
    fits: &[GlmmStudyFit],
    ads: &[AdStudy],
    sigma: &RandomEffectCov,
) -> Result<Matrix2<f64>> {
    let mut total = Matrix2::zeros();
    for fit in fits {
        total += laplace_block(fit, sigma)?;
    }
    for ad in ads {
        total += ad_block(ad, sigma.bb);
    }
    Ok(total)
}

/// Variance of the combined `beta` estimate at `sigma`: the `[beta, beta]`
/// entry of the inverse summed precision. Without IPD only `beta` is
/// identified and the variance is `1 / sum (Sigma_bb + V_j)^-1`.
pub fn variance_beta_at(
    fits: &[GlmmStudyFit],
    ads: &[AdStudy],
    sigma: &RandomEffectCov,
) -> Result<f64> {
    check_inputs(fits, ads)?;
    if fits.is_empty() {
        return Ok(1.0
            / ads
                .iter()
                .map(|a| 1.0 / (sigma.bb + a.var_hat()))
                .sum::<f64>());
    }
    let inv = combined_precision(fits, ads, sigma)?
        .try_inverse()
        .ok_or(Error::Singular("summed precision"))?;
    Ok(inv[(0, 0)])
}

/// Precision-weighted mean `(beta, alpha)` at fixed `sigma`. AD studies inform
/// only `beta`; at least one IPD fit is needed to identify `alpha`.
pub fn profile_mean(
    fits: &[GlmmStudyFit],
    ads: &[AdStudy],
    sigma: &RandomEffectCov,
) -> Result<(f64, f64)> {
    if fits.is_empty() {
        return Err(Error::NotEstimable(
            "the mean intercept needs at least one IPD study".into(),
        ));
    }
    let mut precision = Matrix2::zeros();
    let mut rhs = Vector2::zeros();
    for fit in fits {
        let delta = laplace_block(fit, sigma)?;
        precision += delta;
        rhs += delta * fit.theta();
    }
    for ad in ads {
        let omega = ad_block(ad, sigma.bb);
        precision += omega;
        rhs += omega * Vector2::new(ad.beta_hat(), 0.0);
    }
    let theta = precision
        .cholesky()
        .ok_or(Error::Singular("summed precision"))?
        .solve(&rhs);
    Ok((theta[0], theta[1]))
}

/// Inverse-variance mean of AD effects with weights `(Sigma_bb + V_j)^-1`.
pub fn pooled_ad_beta(ads: &[AdStudy], sigma_bb: f64) -> Result<f64> {
    if ads.is_empty() {
        return Err(Error::NotEstimable("no AD studies".into()));
    }
    let (num, den) = ads.iter().fold((0.0, 0.0), |(num, den), a| {
        let w = 1.0 / (sigma_bb + a.var_hat());
        (num + w * a.beta_hat(), den + w)
    });
    Ok(num / den)
}

/// Composite log-likelihood at a given mean. Terms that do not involve
/// `(beta, alpha, Sigma)` are dropped.
pub fn composite_loglik_at(
    fits: &[GlmmStudyFit],
    ads: &[AdStudy],
    sigma: &RandomEffectCov,
    beta: f64,
    alpha: f64,
) -> Result<f64> {
    check_inputs(fits, ads)?;
    let mean = Vector2::new(beta, alpha);
    let mut total = 0.0;
    for fit in fits {
        let delta = laplace_block(fit, sigma)?;
        let det = delta.determinant();
        if !(det > 0.0) {
            return Err(Error::Singular("Laplace block"));
        }
        let q = fit.theta() - mean;
        total += -0.5 * (q.transpose() * delta * q)[(0, 0)] + 0.5 * det.ln();
    }
    for ad in ads {
        let s = sigma.bb + ad.var_hat();
        total += -0.5 * (ad.beta_hat() - beta).powi(2) / s - 0.5 * s.ln();
    }
    Ok(total)
}

fn profiled(fits: &[GlmmStudyFit], ads: &[AdStudy], sigma: &RandomEffectCov) -> Result<(f64, f64)> {
    if fits.is_empty() {
        Ok((pooled_ad_beta(ads, sigma.bb)?, 0.0))
    } else {
        profile_mean(fits, ads, sigma)
    }
}

/// Profile composite log-likelihood in `Sigma`.
pub fn composite_loglik(
    fits: &[GlmmStudyFit],
    ads: &[AdStudy],
    sigma: &RandomEffectCov,
) -> Result<f64> {
    check_inputs(fits, ads)?;
    let (beta, alpha) = profiled(fits, ads, sigma)?;
    composite_loglik_at(fits, ads, sigma, beta, alpha)
}

/// Unconstrained coordinates of `Sigma` used by the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovParam {
    /// `[t0, t1, t2]`, see [`RandomEffectCov::from_log_cholesky`].
    LogCholesky,
    /// `[log sd_b, log sd_a]` with zero covariance.
    Independent,
    /// `[log sd_b]`; used when no IPD study identifies the intercept.
    BetaOnly,
}

impl CovParam {
    pub fn dim(self) -> usize {
        match self {
            CovParam::LogCholesky => 3,
            CovParam::Independent => 2,
            CovParam::BetaOnly => 1,
        }
    }

    pub fn decode(self, t: &[f64]) -> RandomEffectCov {
        match self {
            CovParam::LogCholesky => RandomEffectCov::from_log_cholesky(t),
            CovParam::Independent => RandomEffectCov {
                bb: (2.0 * t[0]).exp(),
                ba: 0.0,
                aa: (2.0 * t[1]).exp(),
            },
            CovParam::BetaOnly => RandomEffectCov {
                bb: (2.0 * t[0]).exp(),
                ba: 0.0,
                aa: 0.0,
            },
        }
    }

    pub fn encode(self, sigma: &RandomEffectCov, floor: f64) -> Vec<f64> {
        let half_log = |v: f64| 0.5 * v.max(floor).ln();
        match self {
            CovParam::LogCholesky => sigma.to_log_cholesky(floor).to_vec(),
            CovParam::Independent => vec![half_log(sigma.bb), half_log(sigma.aa)],
            CovParam::BetaOnly => vec![half_log(sigma.bb)],
        }
    }
}

/// Gradient of the profile log-likelihood with respect to the unconstrained
/// coordinates `t` of `param`. The mean is held at its profiled value, which
/// is exact because the mean is stationary there.
pub fn composite_loglik_gradient(
    fits: &[GlmmStudyFit],
    ads: &[AdStudy],
    param: CovParam,
    t: &[f64],
) -> Result<Vec<f64>> {
    let sigma = param.decode(t);
    let (beta, alpha) = profiled(fits, ads, &sigma)?;
    let mean = Vector2::new(beta, alpha);
    // symmetric G with dl = tr(G dSigma)
    let mut g = Matrix2::zeros();
    for fit in fits {
        let delta = laplace_block(fit, &sigma)?;
        let dq = delta * (fit.theta() - mean);
        g += 0.5 * (dq * dq.transpose() - delta);
    }
    for ad in ads {
        let s = sigma.bb + ad.var_hat();
        g[(0, 0)] += 0.5 * (ad.beta_hat() - beta).powi(2) / (s * s) - 0.5 / s;
    }
    Ok(match param {
        CovParam::LogCholesky => {
            let l = Matrix2::new(t[0].exp(), 0.0, t[1], t[2].exp());
            let gl = 2.0 * g * l;
            vec![gl[(0, 0)] * l[(0, 0)], gl[(1, 0)], gl[(1, 1)] * l[(1, 1)]]
        }
        CovParam::Independent => vec![g[(0, 0)] * 2.0 * sigma.bb, g[(1, 1)] * 2.0 * sigma.aa],
        CovParam::BetaOnly => vec![g[(0, 0)] * 2.0 * sigma.bb],
    })
}

/// DerSimonian-Laird moment estimate of between-study variance.
pub fn dersimonian_laird(estimates: &[f64], variances: &[f64]) -> f64 {
    let k = estimates.len();
    if k < 2 {
        return 0.0;
    }
    let w: Vec<f64> = variances.iter().map(|v| 1.0 / v).collect();
    let sw: f64 = w.iter().sum();
    let sw2: f64 = w.iter().map(|x| x * x).sum();
    let mean = w.iter().zip(estimates).map(|(w, b)| w * b).sum::<f64>() / sw;
    let q: f64 = w
        .iter()
        .zip(estimates)
        .map(|(w, b)| w * (b - mean).powi(2))
        .sum();
    ((q - (k as f64 - 1.0)) / (sw - sw2 / sw)).max(0.0)
}

/// Moment-based starting point for the variance-component search.
pub fn initial_cov(fits: &[GlmmStudyFit], ads: &[AdStudy]) -> Result<RandomEffectCov> {
    let mut betas = Vec::with_capacity(fits.len() + ads.len());
    let mut vars = Vec::with_capacity(fits.len() + ads.len());
    for ad in ads {
        betas.push(ad.beta_hat());
        vars.push(ad.var_hat());
    }
    if ads.len() < 2 {
        for fit in fits {
            betas.push(fit.beta_hat);
            vars.push(fit.variance_beta()?);
        }
    }
    let bb = dersimonian_laird(&betas, &vars);
    let aa = if fits.len() >= 2 {
        let m = fits.iter().map(|f| f.alpha_hat).sum::<f64>() / fits.len() as f64;
        let spread =
            fits.iter().map(|f| (f.alpha_hat - m).powi(2)).sum::<f64>() / (fits.len() - 1) as f64;
        let mut noise = 0.0;
        for fit in fits {
            noise += fit.covariance()?[(1, 1)];
        }
        (spread - noise / fits.len() as f64).max(0.0)
    } else {
        0.0
    };
    Ok(RandomEffectCov { bb, ba: 0.0, aa })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarCompFit {
    pub sigma: RandomEffectCov,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Some variance ended near zero.
    pub boundary: bool,
}

const INIT_FLOOR: f64 = 1e-3;

/// Maximizes the profile composite log-likelihood over `Sigma` with a simplex
/// search in `param` coordinates, restarted once from the first optimum.
pub fn maximize_varcomp(
    fits: &[GlmmStudyFit],
    ads: &[AdStudy],
    init: &RandomEffectCov,
    param: CovParam,
    opts: SimplexOptions,
) -> Result<VarCompFit> {
    if fits.len() + ads.len() < 2 {
        return Err(Error::NotEstimable(
            "variance components need at least 2 studies".into(),
        ));
    }
    if fits.is_empty() && param != CovParam::BetaOnly {
        return Err(Error::NotEstimable(
            "intercept variance needs IPD studies".into(),
        ));
    }
    let objective = |t: &[f64]| match composite_loglik(fits, ads, &param.decode(t)) {
        Ok(v) => -v,
        Err(_) => f64::INFINITY,
    };
    let x0 = param.encode(init, INIT_FLOOR);
    let first = nelder_mead(objective, &x0, opts);
    let second = nelder_mead(objective, &first.x, opts);
    let iterations = first.iterations + second.iterations;
    let best = if second.value <= first.value {
        second
    } else {
        first
    };
    if !best.value.is_finite() {
        return Err(Error::NoConvergence {
            what: "variance-component search",
            iterations,
        });
    }
    let sigma = param.decode(&best.x);
    let boundary = sigma.on_boundary(param != CovParam::BetaOnly);
    if !best.converged {
        if boundary {
            log::debug!(
                "variance-component search drifting to the boundary after {iterations} iterations"
            );
        } else {
            warn!("variance-component search stopped after {iterations} iterations without converging");
        }
    }
    Ok(VarCompFit {
        sigma,
        loglik: -best.value,
        iterations,
        converged: best.converged,
        boundary,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct GlmmOptions {
    /// Force `Sigma_ba = 0`.
    pub independent: bool,
    /// Skip the search and use this covariance.
    pub fixed_sigma: Option<RandomEffectCov>,
    pub simplex: SimplexOptions,
}

impl Default for GlmmOptions {
    fn default() -> Self {
        Self {
            independent: false,
            fixed_sigma: None,
            simplex: SimplexOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlmmCombined {
    pub beta_hat: f64,
    /// `None` when no IPD study identifies the intercept.
    pub alpha_hat: Option<f64>,
    pub sigma_hat: RandomEffectCov,
    pub variance_beta: f64,
    pub loglik: f64,
    pub converged: bool,
    pub boundary: bool,
    pub partition: Partition,
}

/// Fits and summaries for a partition: IPD studies are fitted, the others
/// reduced to AD (IPD-only studies are summarized on the fly).
pub fn split_collection(
    collection: &StudyCollection,
    partition: &Partition,
) -> Result<(Vec<GlmmStudyFit>, Vec<AdStudy>)> {
    if partition.k() != collection.len() {
        return Err(Error::InvalidInput(format!(
            "partition covers {} studies but the collection has {}",
            partition.k(),
            collection.len()
        )));
    }
    let mut fits = Vec::with_capacity(partition.k1());
    for &j in partition.ipd() {
        let study = collection.study(j);
        let ipd = study.ipd.as_ref().ok_or_else(|| {
            Error::study(
                &study.id,
                "selected as IPD but only aggregate data is available",
            )
        })?;
        fits.push(fit_study_logistic(ipd)?);
    }
    let ads = partition
        .ad()
        .iter()
        .map(|&j| collection.ad_or_summary(j))
        .collect::<Result<Vec<_>>>()?;
    Ok((fits, ads))
}

/// Full pipeline: fits, variance components, profile mean and variance.
pub fn combined_estimate_glmm(
    collection: &StudyCollection,
    partition: &Partition,
    options: &GlmmOptions,
) -> Result<GlmmCombined> {
    if collection.kind() != OutcomeKind::Binary {
        return Err(Error::InvalidInput(
            "the logistic model needs binary outcomes".into(),
        ));
    }
    let (fits, ads) = split_collection(collection, partition)?;
    combine_fits(&fits, &ads, options, partition.clone())
}

/// [`combined_estimate_glmm`] on already reduced inputs.
pub fn combine_fits(
    fits: &[GlmmStudyFit],
    ads: &[AdStudy],
    options: &GlmmOptions,
    partition: Partition,
) -> Result<GlmmCombined> {
    check_inputs(fits, ads)?;
    let param = if fits.is_empty() {
        CovParam::BetaOnly
    } else if options.independent {
        CovParam::Independent
    } else {
        CovParam::LogCholesky
    };
    let (sigma, loglik, converged, boundary) = match options.fixed_sigma {
        Some(sigma) => (sigma, composite_loglik(fits, ads, &sigma)?, true, false),
        None => {
            let init = initial_cov(fits, ads)?;
            let vc = maximize_varcomp(fits, ads, &init, param, options.simplex)?;
            (vc.sigma, vc.loglik, vc.converged, vc.boundary)
        }
    };
    let (beta_hat, alpha_hat) = profiled(fits, ads, &sigma)?;
    Ok(GlmmCombined {
        beta_hat,
        alpha_hat: (!fits.is_empty()).then_some(alpha_hat),
        sigma_hat: sigma,
        variance_beta: variance_beta_at(fits, ads, &sigma)?,
        loglik,
        converged,
        boundary,
        partition,
    })
}

/// Intercept variance from pilot IPD studies under the logistic model.
pub fn estimate_sigma_alpha_logistic(pilots: &[IpdStudy]) -> Result<SigmaAlphaEstimate> {
    let fits = pilots
        .iter()
        .map(fit_study_logistic)
        .collect::<Result<Vec<_>>>()?;
    let init = initial_cov(&fits, &[])?;
    let vc = maximize_varcomp(
        &fits,
        &[],
        &init,
        CovParam::Independent,
        SimplexOptions::default(),
    )?;
    let truncated = vc.sigma.aa < BOUNDARY_TOL;
    if truncated {
        warn!("intercept variance estimate is on the boundary; truncated at 0");
    }
    Ok(SigmaAlphaEstimate {
        sigma_alpha_sq: if truncated { 0.0 } else { vc.sigma.aa },
        truncated,
        loglik: vc.loglik,
        iterations: vc.iterations,
    })
}

/// Per-study quantities of the closed-form logistic variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticSelectionTerms {
    pub p1: f64,
    pub p0: f64,
    /// `n_t p1 (1 - p1)`
    pub a: f64,
    /// `n_c p0 (1 - p0)`
    pub b: f64,
    /// `1/a + 1/b`, the variance of the study's log odds ratio.
    pub h: f64,
    /// `a / (a + b)`
    pub g: f64,
}

impl LogisticSelectionTerms {
    pub fn new(p1: f64, p0: f64, n_t: f64, n_c: f64) -> Result<Self> {
        if !(p1 > 0.0 && p1 < 1.0 && p0 > 0.0 && p0 < 1.0) {
            return Err(Error::InvalidInput("arm rates must lie in (0, 1)".into()));
        }
        if !(n_t > 0.0 && n_c > 0.0) {
            return Err(Error::InvalidInput("arm sizes must be positive".into()));
        }
        let a = n_t * p1 * (1.0 - p1);
        let b = n_c * p0 * (1.0 - p0);
        Ok(Self {
            p1,
            p0,
            a,
            b,
            h: 1.0 / a + 1.0 / b,
            g: a / (a + b),
        })
    }

    /// `sigma_a^2 h + 1/(a b)`
    pub fn c(&self, sigma_alpha_sq: f64) -> f64 {
        sigma_alpha_sq * self.h + 1.0 / (self.a * self.b)
    }

    /// Selection weight `h / c`.
    pub fn weight(&self, sigma_alpha_sq: f64) -> f64 {
        self.h / self.c(sigma_alpha_sq)
    }
}

/// Closed-form variance of the combined log odds ratio with a random
/// intercept of variance `sigma_alpha_sq` and a common treatment effect.
pub fn logistic_variance_combined(
    terms: &[LogisticSelectionTerms],
    ipd: &[usize],
    sigma_alpha_sq: f64,
) -> Result<f64> {
    if terms.is_empty() {
        return Err(Error::NotEstimable("no studies".into()));
    }
    if let Some(&j) = ipd.iter().find(|&&j| j >= terms.len()) {
        return Err(Error::InvalidInput(format!("index {j} out of range")));
    }
    let base: f64 = terms.iter().map(|t| 1.0 / t.h).sum();
    if ipd.is_empty() {
        return Ok(1.0 / base);
    }
    let (sw, swg) = ipd.iter().fold((0.0, 0.0), |(sw, swg), &j| {
        let w = terms[j].weight(sigma_alpha_sq);
        (sw + w, swg + w * terms[j].g)
    });
    let g_bar = swg / sw;
    let spread: f64 = ipd
        .iter()
        .map(|&j| terms[j].weight(sigma_alpha_sq) * (terms[j].g - g_bar).powi(2))
        .sum();
    Ok(1.0 / (spread + base))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// From `(beta_hat, V, n_t, n_c)` under the rare-disease approximation.
    RareDisease,
    /// From reconstructed 2x2 tables; needs case counts.
    TwoByTwo,
}

impl std::str::FromStr for WeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rare_disease" | "rare-disease" => Ok(Self::RareDisease),
            "two_by_two" | "two-by-two" => Ok(Self::TwoByTwo),
            other => Err(Error::InvalidInput(format!(
                "unknown weight mode `{other}`"
            ))),
        }
    }
}

/// Selection inputs `(u, v) = (g, h/c)` computed from aggregate data alone.
pub fn selection_weights_logistic(
    ads: &[AdStudy],
    sigma_alpha_sq: f64,
    mode: WeightMode,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(sigma_alpha_sq >= 0.0 && sigma_alpha_sq.is_finite()) {
        return Err(Error::InvalidInput(
            "intercept variance must be non-negative".into(),
        ));
    }
    let mut u = Vec::with_capacity(ads.len());
    let mut v = Vec::with_capacity(ads.len());
    for ad in ads {
        let (n_t, n_c) = (ad.n_t() as f64, ad.n_c() as f64);
        match mode {
            WeightMode::RareDisease => {
                let g = 1.0 / (n_t / n_c * ad.beta_hat().exp() + 1.0);
                let var = ad.var_hat();
                u.push(g);
                v.push((1.0 / var) / (sigma_alpha_sq / var + g * (1.0 - g)));
            }
            WeightMode::TwoByTwo => {
                let (y1, y0) = ad
                    .cases()
                    .ok_or_else(|| Error::study(ad.id(), "2x2 weights need case counts"))?;
                let rate = |y: u64, n: f64| {
                    let y = y as f64;
                    if y == 0.0 || y == n {
                        (y + 0.5) / (n + 1.0)
                    } else {
                        y / n
                    }
                };
                if y1 == 0 || y0 == 0 || y1 == ad.n_t() || y0 == ad.n_c() {
                    warn!(
                        "study `{}`: zero cell in 2x2 table; adding 0.5 to each cell",
                        ad.id()
                    );
                }
                let t = LogisticSelectionTerms::new(rate(y1, n_t), rate(y0, n_c), n_t, n_c)?;
                u.push(t.g);
                v.push(t.weight(sigma_alpha_sq));
            }
        }
    }
    Ok((u, v))
}
