//! Acceptance checks. Each test prints one `criterion N: PASS|FAIL` line with
//! the measured values, then asserts.

use std::io::Write;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use ipdmix::data::load_ad;
use ipdmix::glmm::{self, GlmmStudyFit, LogisticSelectionTerms, RandomEffectCov};
use ipdmix::lmm::{self, VarianceComponents};
use ipdmix::select::{self, SelectionInstance};
use ipdmix::sim::{self, ScenarioConfig, SubsampleConfig, BATHTUB_PI, UNIFORM_PI};
use ipdmix::{AdStudy, IpdStudy, OutcomeKind, Partition};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(criterion: u32, pass: bool, elapsed: Duration, limit: Duration, detail: &str) {
    let in_time = elapsed <= limit;
    let status = if pass && in_time { "PASS" } else { "FAIL" };
    // straight to the handle so the line survives output capture
    let mut out = std::io::stdout().lock();
    writeln!(
        out,
        "criterion {criterion}: {status} ({detail}; {:.2}s of {}s)",
        elapsed.as_secs_f64(),
        limit.as_secs()
    )
    .unwrap();
}

fn data_file(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(name)
}

fn re_ad(pi: &[f64]) -> f64 {
    let vc = VarianceComponents::pooled(0.025, 2.5).unwrap();
    let n = vec![10; pi.len()];
    lmm::relative_efficiency(&n, pi, &vc, &Partition::all_ad(pi.len())).unwrap()
}

#[test]
fn criterion_1_closed_form_relative_efficiency() {
    let start = Instant::now();
    let vc = VarianceComponents::pooled(0.025, 2.5).unwrap();
    let uniform_ad = re_ad(&UNIFORM_PI);
    let chosen = Partition::new(10, &[0, 1, 8, 9]).unwrap();
    let uniform_best4 = lmm::relative_efficiency(&[10; 10], &UNIFORM_PI, &vc, &chosen).unwrap();
    let bathtub_ad = re_ad(&BATHTUB_PI);
    let elapsed = start.elapsed();

    let checks = [
        (uniform_ad - 0.79).abs() <= 0.005,
        (uniform_best4 - 0.956).abs() <= 0.001,
        (bathtub_ad - 0.44).abs() <= 0.005,
    ];
    let pass = checks.iter().all(|&c| c);
    verdict(
        1,
        pass,
        elapsed,
        Duration::from_secs(1),
        &format!("uniform AD-MA RE {uniform_ad:.6} (target 0.79 +/- 0.005), uniform RE(1,2,9,10) {uniform_best4:.6} (0.956 +/- 0.001), bathtub AD-MA RE {bathtub_ad:.6} (0.44 +/- 0.005)"),
    );
    assert!(pass, "checks {checks:?}");
}

/// `[beta, beta]` entry of `(U' H^-1 U)^-1` with every study stacked densely.
fn dense_gls_variance(n: &[usize], pi: &[f64], s2: &[f64], sa: f64, ipd: &[usize]) -> f64 {
    let mut precision = DMatrix::<f64>::zeros(2, 2);
    let mut ad_precision = 0.0;
    for j in 0..n.len() {
        let nt = (pi[j] * n[j] as f64).round() as usize;
        if ipd.contains(&j) {
            let u = DMatrix::from_fn(n[j], 2, |i, c| {
                if c == 0 {
                    1.0
                } else if i < nt {
                    1.0
                } else {
                    0.0
                }
            });
            let h = DMatrix::from_fn(n[j], n[j], |a, b| sa + if a == b { s2[j] } else { 0.0 });
            let hinv = h.try_inverse().unwrap();
            precision += u.transpose() * hinv * &u;
        } else {
            let p = nt as f64 / n[j] as f64;
            ad_precision += n[j] as f64 * p * (1.0 - p) / s2[j];
        }
    }
    if ipd.is_empty() {
        return 1.0 / ad_precision;
    }
    // AD studies inform the slope only
    precision[(1, 1)] += ad_precision;
    precision.try_inverse().unwrap()[(1, 1)]
}

#[test]
fn criterion_2_lmm_dense_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let k = rng.random_range(1..=10);
        let n: Vec<usize> = (0..k).map(|_| rng.random_range(2..=20)).collect();
        let pi: Vec<f64> = n
            .iter()
            .map(|&nj| rng.random_range(1..nj) as f64 / nj as f64)
            .collect();
        let s2: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..5.0)).collect();
        let sa = if rng.random_bool(0.1) {
            0.0
        } else {
            rng.random_range(0.0..1.0)
        };
        let ipd: Vec<usize> = (0..k).filter(|_| rng.random_bool(0.5)).collect();
        let vc = VarianceComponents::per_study(sa, s2.clone()).unwrap();
        let closed = lmm::variance_combined(&n, &pi, &vc, &ipd).unwrap();
        let dense = dense_gls_variance(&n, &pi, &s2, sa, &ipd);
        worst = worst.max(((closed - dense) / dense).abs());
    }
    let elapsed = start.elapsed();
    let pass = worst < 1e-10;
    verdict(
        2,
        pass,
        elapsed,
        Duration::from_secs(10),
        &format!("max relative error {worst:.2e} over 1000 instances"),
    );
    assert!(pass);
}

/// Every subset in lexicographic order, no pruning; ties go to the later
/// (lexicographically larger) set for the maximum and the earlier for the minimum.
fn enumerate(u: &[f64], v: &[f64], k1: usize) -> ((f64, Vec<usize>), (f64, Vec<usize>)) {
    let k = u.len();
    let mut set: Vec<usize> = (0..k1).collect();
    let mut best = (f64::NEG_INFINITY, Vec::new());
    let mut worst = (f64::INFINITY, Vec::new());
    loop {
        let obj = select::objective(u, v, &set).unwrap();
        if obj >= best.0 {
            best = (obj, set.clone());
        }
        if obj < worst.0 {
            worst = (obj, set.clone());
        }
        // next combination
        let mut i = k1;
        loop {
            if i == 0 {
                return (best, worst);
            }
            i -= 1;
            if set[i] < k - k1 + i {
                set[i] += 1;
                for t in i + 1..k1 {
                    set[t] = set[t - 1] + 1;
                }
                break;
            }
        }
    }
}

#[test]
fn criterion_3_exact_selection() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    for _ in 0..200 {
        let k = rng.random_range(3..=12);
        let k1 = rng.random_range(2..k);
        // coarse grids make exact ties common
        let u: Vec<f64> = (0..k)
            .map(|_| rng.random_range(1..10) as f64 / 10.0)
            .collect();
        let v: Vec<f64> = (0..k).map(|_| rng.random_range(1..5) as f64).collect();
        let inst = SelectionInstance::new(u.clone(), v.clone(), k1).unwrap();
        let (best, worst) = enumerate(&u, &v, k1);
        let got_best = select::brute_force_select(&inst).unwrap();
        let got_worst = select::brute_force_worst(&inst).unwrap();
        if got_best.indifferent {
            continue;
        }
        if got_best.chosen != best.1 || got_worst.chosen != worst.1 {
            mismatches += 1;
        }
    }
    let vc = VarianceComponents::pooled(0.025, 2.5).unwrap();
    let (u, v) = select::selection_weights_lmm(&[10; 10], &UNIFORM_PI, &vc).unwrap();
    let inst = SelectionInstance::new(u, v, 2).unwrap();
    let best: Vec<usize> = select::brute_force_select(&inst)
        .unwrap()
        .chosen
        .iter()
        .map(|j| j + 1)
        .collect();
    let worst: Vec<usize> = select::brute_force_worst(&inst)
        .unwrap()
        .chosen
        .iter()
        .map(|j| j + 1)
        .collect();
    let elapsed = start.elapsed();
    let pass = mismatches == 0 && best == [1, 10] && worst == [3, 4];
    verdict(
        3,
        pass,
        elapsed,
        Duration::from_secs(30),
        &format!("{mismatches} mismatches in 200 instances; uniform design k1=2 best {best:?}, worst {worst:?}"),
    );
    assert!(pass);
}

#[test]
fn criterion_4_sequential_selector_quality() {
    let start = Instant::now();
    let cfg = ScenarioConfig {
        seed: 4,
        ..ScenarioConfig::mixture_match(30)
    };
    let report = sim::run_match_experiment(&cfg).unwrap();
    let elapsed = start.elapsed();
    let max_mean_ratio = report.mean_ratio.iter().copied().fold(0.0, f64::max);
    let min_exact = (0..report.k1.len())
        .map(|i| report.exact_rate(i))
        .fold(1.0, f64::min);
    let pass = max_mean_ratio <= 1.002 && min_exact >= 0.75;
    verdict(
        4,
        pass,
        elapsed,
        Duration::from_secs(120),
        &format!("k=30, 100 replicates: largest mean ratio {max_mean_ratio:.5}, lowest exact-match rate {min_exact:.2}"),
    );
    assert!(pass);
}

#[test]
fn criterion_5_variance_component_sensitivity() {
    let start = Instant::now();
    let run = |heterogeneous| {
        let cfg = ScenarioConfig {
            seed: 5,
            replicates: 1000,
            ..ScenarioConfig::sensitivity(heterogeneous)
        };
        sim::run_sensitivity_experiment(&cfg).unwrap()
    };
    let homogeneous = run(false);
    let heterogeneous = run(true);
    let elapsed = start.elapsed();
    let (a, b) = (homogeneous.rate_at_least(4), heterogeneous.rate_at_least(4));
    let pass = a > 0.99 && b >= 0.90;
    verdict(
        5,
        pass,
        elapsed,
        Duration::from_secs(300),
        &format!(
            "overlap >= 4 of 5: homogeneous {a:.3} {:?}, heterogeneous {b:.3} {:?}",
            homogeneous.counts, heterogeneous.counts
        ),
    );
    assert!(pass);
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        for t in i..=j {
            r[idx[t]] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mx, my) = (m(&rx), m(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum::<f64>().sqrt();
    let sy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum::<f64>().sqrt();
    cov / (sx * sy)
}

#[test]
fn criterion_6_logistic_experiment() {
    let start = Instant::now();
    let cfg = ScenarioConfig {
        seed: 6,
        replicates: 200,
        ..ScenarioConfig::logistic(50, 100)
    };
    let report = sim::run_glmm_experiment(&cfg).unwrap();
    let elapsed = start.elapsed();
    let fractions: Vec<f64> = report.rows.iter().map(|r| r.ipd_fraction).collect();
    let re: Vec<f64> = report.rows.iter().map(|r| r.rel_eff).collect();
    let rho = spearman(&fractions, &re);
    let all_ad = &report.rows[0];
    let mse_ok = (all_ad.mse - 0.021).abs() <= 0.5 * 0.021;
    let pass = (0.85..=0.99).contains(&all_ad.rel_eff) && rho >= 0.8 && mse_ok;
    verdict(
        6,
        pass,
        elapsed,
        Duration::from_secs(1200),
        &format!(
            "all-AD RE {:.3}, RE by fraction {:?}, Spearman {rho:.2}, all-AD MSE {:.4}, bias {:.3}, {} redraws, {} failed replicates",
            all_ad.rel_eff,
            re.iter().map(|x| (x * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            all_ad.mse,
            all_ad.bias,
            report.redraws,
            report.failures
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_logistic_closed_form() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = rng.random_range(2..=8);
        let sa = rng.random_range(0.0..1.5);
        let mut terms = Vec::new();
        let mut fits = Vec::new();
        let mut ads = Vec::new();
        for j in 0..k {
            let (p1, p0) = (rng.random_range(0.05..0.95), rng.random_range(0.05..0.95));
            let (nt, nc) = (rng.random_range(5..200u64), rng.random_range(5..200u64));
            let t = LogisticSelectionTerms::new(p1, p0, nt as f64, nc as f64).unwrap();
            fits.push(GlmmStudyFit::from_rates(format!("s{j}"), p1, p0, nt, nc).unwrap());
            ads.push(AdStudy::new(format!("s{j}"), 0.0, t.h, nt, nc, None).unwrap());
            terms.push(t);
        }
        let ipd: Vec<usize> = (0..k).filter(|_| rng.random_bool(0.5)).collect();
        let sigma = RandomEffectCov::independent(0.0, sa).unwrap();
        let f: Vec<GlmmStudyFit> = ipd.iter().map(|&j| fits[j].clone()).collect();
        let a: Vec<AdStudy> = (0..k)
            .filter(|j| !ipd.contains(j))
            .map(|j| ads[j].clone())
            .collect();
        let matrix = glmm::variance_beta_at(&f, &a, &sigma).unwrap();
        let closed = glmm::logistic_variance_combined(&terms, &ipd, sa).unwrap();
        worst = worst.max(((closed - matrix) / matrix).abs());
    }
    let elapsed = start.elapsed();
    let pass = worst < 1e-8;
    verdict(
        7,
        pass,
        elapsed,
        Duration::from_secs(60),
        &format!("max relative error {worst:.2e} over 100 instances"),
    );
    assert!(pass);
}

#[test]
fn criterion_8_beta_blocker_workflow() {
    let start = Instant::now();
    let trials = load_ad(data_file("beta_blocker.csv"), OutcomeKind::Binary).unwrap();
    let cfg = SubsampleConfig {
        seed: 8,
        ..Default::default()
    };
    let report = sim::run_subsample_workflow(&trials, &cfg).unwrap();
    let elapsed = start.elapsed();
    let (ipd, best, ad) = (
        report.ipd_ma().variance,
        report.best().variance,
        report.ad_ma().variance,
    );
    let gap = report.gap_recovered();
    let pass = ipd <= best && best <= ad && gap >= 0.5;
    let ids: Vec<usize> = report.best().ipd.iter().map(|j| j + 1).collect();
    verdict(
        8,
        pass,
        elapsed,
        Duration::from_secs(60),
        &format!(
            "sigma_alpha^2 {:.4}; variances IPD-MA {ipd:.4}, best-5 {best:.4} (trials {ids:?}), worst-5 {:.4}, AD-MA {ad:.4}; gap recovered {gap:.2}",
            report.sigma_alpha_sq,
            report.worst().variance
        ),
    );
    assert!(pass);
}

fn binary_study(rng: &mut ChaCha8Rng, id: &str) -> IpdStudy {
    loop {
        let n = rng.random_range(20..120);
        let nt = rng.random_range(5..n - 5);
        let (p1, p0) = (rng.random_range(0.15..0.85), rng.random_range(0.15..0.85));
        let x: Vec<bool> = (0..n).map(|i| i < nt).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|&t| {
                if rng.random_bool(if t { p1 } else { p0 }) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let s = IpdStudy::new(id, y, x, OutcomeKind::Binary).unwrap();
        if glmm::fit_study_logistic(&s).is_ok() {
            return s;
        }
    }
}

#[test]
fn criterion_9_property_suites() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut failures: Vec<String> = Vec::new();

    // variance never grows as S1 grows
    let mut monotone_violations = 0;
    for _ in 0..500 {
        let k = rng.random_range(2..=12);
        let n: Vec<usize> = (0..k).map(|_| rng.random_range(2..=40)).collect();
        let pi: Vec<f64> = n
            .iter()
            .map(|&nj| rng.random_range(1..nj) as f64 / nj as f64)
            .collect();
        let s2: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..6.0)).collect();
        let vc = VarianceComponents::per_study(rng.random_range(0.0..2.0), s2).unwrap();
        let mut order: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut prev = lmm::variance_ad_ma(&n, &pi, &vc).unwrap();
        for m in 1..=k {
            let mut s1 = order[..m].to_vec();
            s1.sort_unstable();
            let v = lmm::variance_combined(&n, &pi, &vc, &s1).unwrap();
            if v > prev * (1.0 + 1e-12) {
                monotone_violations += 1;
            }
            prev = v;
        }
    }
    if monotone_violations > 0 {
        failures.push(format!("{monotone_violations} monotonicity violations"));
    }

    // equal proportions make the partition irrelevant
    let mut invariance_gap = 0.0f64;
    for _ in 0..200 {
        let k = rng.random_range(2..=10);
        let n = rng.random_range(2..=30usize);
        let pi = vec![rng.random_range(1..n) as f64 / n as f64; k];
        let s2: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..6.0)).collect();
        let vc = VarianceComponents::per_study(rng.random_range(0.0..2.0), s2).unwrap();
        let ns = vec![n; k];
        let ad = lmm::variance_ad_ma(&ns, &pi, &vc).unwrap();
        let s1: Vec<usize> = (0..k).filter(|_| rng.random_bool(0.5)).collect();
        let v = lmm::variance_combined(&ns, &pi, &vc, &s1).unwrap();
        invariance_gap = invariance_gap.max(((v - ad) / ad).abs());
    }
    if invariance_gap > 1e-12 {
        failures.push(format!(
            "equal-proportion invariance gap {invariance_gap:.2e}"
        ));
    }

    // composite log-likelihood gradient against central differences
    let mut grad_err = 0.0f64;
    for trial in 0..20 {
        let fits: Vec<GlmmStudyFit> = (0..rng.random_range(2..6))
            .map(|j| {
                glmm::fit_study_logistic(&binary_study(&mut rng, &format!("f{trial}_{j}"))).unwrap()
            })
            .collect();
        let ads: Vec<AdStudy> = (0..rng.random_range(0..4))
            .map(|j| {
                AdStudy::new(
                    format!("a{j}"),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(0.05..0.6),
                    30,
                    30,
                    None,
                )
                .unwrap()
            })
            .collect();
        for param in [glmm::CovParam::LogCholesky, glmm::CovParam::Independent] {
            let t: Vec<f64> = (0..param.dim())
                .map(|_| rng.random_range(-1.5..0.5))
                .collect();
            let analytic = glmm::composite_loglik_gradient(&fits, &ads, param, &t).unwrap();
            for i in 0..t.len() {
                let h = 1e-5;
                let mut tp = t.clone();
                let mut tm = t.clone();
                tp[i] += h;
                tm[i] -= h;
                let fp = glmm::composite_loglik(&fits, &ads, &param.decode(&tp)).unwrap();
                let fm = glmm::composite_loglik(&fits, &ads, &param.decode(&tm)).unwrap();
                let numeric = (fp - fm) / (2.0 * h);
                let scale = analytic[i].abs().max(1e-2);
                grad_err = grad_err.max((analytic[i] - numeric).abs() / scale);
            }
        }
    }
    if grad_err >= 1e-5 {
        failures.push(format!("log-likelihood gradient error {grad_err:.2e}"));
    }

    // logistic information against a finite-difference Hessian
    let mut info_err = 0.0f64;
    for j in 0..50 {
        let s = binary_study(&mut rng, &format!("h{j}"));
        let fit = glmm::fit_study_logistic(&s).unwrap();
        // score of the two-arm logistic model, written out from the case counts
        let (y1, y0) = s.case_counts();
        let (n1, n0) = (s.n_treated() as f64, s.n_control() as f64);
        let expit = |z: f64| 1.0 / (1.0 + (-z).exp());
        let score = |b: f64, a: f64| {
            let r1 = y1 as f64 - n1 * expit(a + b);
            let r0 = y0 as f64 - n0 * expit(a);
            [r1, r1 + r0]
        };
        let h = 1e-5;
        let (b, a) = (fit.beta_hat, fit.alpha_hat);
        let (sbp, sbm) = (score(b + h, a), score(b - h, a));
        let (sap, sam) = (score(b, a + h), score(b, a - h));
        let hbb = -(sbp[0] - sbm[0]) / (2.0 * h);
        let hba = -(sap[0] - sam[0]) / (2.0 * h);
        let haa = -(sap[1] - sam[1]) / (2.0 * h);
        let numeric = nalgebra::Matrix2::new(hbb, hba, hba, haa);
        info_err = info_err.max((numeric - fit.info).norm() / fit.info.norm());
    }
    if info_err >= 1e-6 {
        failures.push(format!("information error {info_err:.2e}"));
    }

    // reports do not depend on the worker count
    let reports: Vec<_> = [1, 2, 8]
        .iter()
        .map(|&w| {
            let lmm_cfg = ScenarioConfig {
                replicates: 40,
                seed: 9,
                workers: Some(w),
                ..ScenarioConfig::mixture_match(12)
            };
            let glmm_cfg = ScenarioConfig {
                replicates: 8,
                seed: 9,
                workers: Some(w),
                ..ScenarioConfig::logistic(12, 60)
            };
            (
                sim::run_match_experiment(&lmm_cfg).unwrap(),
                sim::run_glmm_experiment(&glmm_cfg).unwrap(),
            )
        })
        .collect();
    let identical = reports.windows(2).all(|w| {
        let bits = |r: &sim::GlmmReport| {
            r.rows
                .iter()
                .flat_map(|x| {
                    [
                        x.estimate.to_bits(),
                        x.mean_variance.to_bits(),
                        x.mse.to_bits(),
                    ]
                })
                .collect::<Vec<_>>()
        };
        w[0].0 == w[1].0 && bits(&w[0].1) == bits(&w[1].1)
    });
    if !identical {
        failures.push("reports differ across worker counts".into());
    }

    let elapsed = start.elapsed();
    let pass = failures.is_empty();
    verdict(
        9,
        pass,
        elapsed,
        Duration::from_secs(120),
        &format!(
            "monotonicity violations {monotone_violations}/500, invariance gap {invariance_gap:.1e}, gradient error {grad_err:.1e}, information error {info_err:.1e}, worker-count identical {identical}"
        ),
    );
    assert!(pass, "{failures:?}");
}
