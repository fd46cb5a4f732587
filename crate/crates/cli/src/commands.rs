use std::io::Write;

use anyhow::{anyhow, bail, Context};
use log::{info, warn};
use rand::seq::index;

use ipdmix::data::{load_ad, load_ipd, summarize_ipd, write_ad_records};
use ipdmix::glmm::{self, GlmmCombined};
use ipdmix::lmm::{self, VarianceComponents};
use ipdmix::rng::{self, DrawKind};
use ipdmix::select::{self, SelectionInstance};
use ipdmix::sim::{self, PiSource, ScenarioConfig, ScenarioKind, SigmaSource, SubsampleConfig};
use ipdmix::{
    AdStudy, GlmmOptions, IpdStudy, OutcomeKind, Partition, SelectionMethod, SelectionResult,
    StudyCollection,
};

use crate::args::{
    parse_k1_range, Components, EstimateArgs, Inputs, Model, ReCurveArgs, SelectArgs, SimulateArgs,
    SummarizeArgs,
};
use crate::manifest::Run;

fn load_inputs(inputs: &Inputs, run: &mut Run) -> anyhow::Result<StudyCollection> {
    let kind = inputs.model.outcome();
    let mut collection = StudyCollection::new(kind);
    if let Some(path) = &inputs.ipd {
        run.record_input(path)?;
        collection = collection.merge(load_ipd(path, kind)?)?;
    }
    if let Some(path) = &inputs.ad {
        run.record_input(path)?;
        collection = collection.merge(load_ad(path, kind)?)?;
    }
    if collection.is_empty() {
        bail!(ipdmix::Error::InvalidInput(
            "no studies: pass --ipd and/or --ad".into()
        ));
    }
    if inputs.expand_tables {
        if inputs.model != Model::Logistic {
            bail!(ipdmix::Error::InvalidInput(
                "--expand-tables applies to the logistic model".into()
            ));
        }
        collection = expand_tables(&collection)?;
    }
    Ok(collection)
}

/// Adds binary IPD rebuilt from the 2x2 counts of every AD-only study that has them.
fn expand_tables(collection: &StudyCollection) -> ipdmix::Result<StudyCollection> {
    let mut expanded = StudyCollection::new(collection.kind());
    for study in collection.studies() {
        match (&study.ipd, &study.ad) {
            (Some(ipd), _) => expanded.push_ipd(ipd.clone())?,
            (None, Some(ad)) => {
                if let Some((ct, cc)) = ad.cases() {
                    expanded.push_ipd(sim::expand_two_by_two(
                        ad.id(),
                        ct,
                        ad.n_t(),
                        cc,
                        ad.n_c(),
                    )?)?;
                }
            }
            (None, None) => {}
        }
        if let Some(ad) = &study.ad {
            expanded.push_ad(ad.clone())?;
        }
    }
    Ok(expanded)
}

fn ad_records(collection: &StudyCollection) -> ipdmix::Result<Vec<AdStudy>> {
    (0..collection.len())
        .map(|j| collection.ad_or_summary(j))
        .collect()
}

fn ipd_indices(collection: &StudyCollection) -> Vec<usize> {
    (0..collection.len())
        .filter(|&j| collection.study(j).ipd.is_some())
        .collect()
}

fn index_of(collection: &StudyCollection, id: &str) -> ipdmix::Result<usize> {
    collection
        .position(id)
        .ok_or_else(|| ipdmix::Error::InvalidInput(format!("unknown study `{id}`")))
}

fn ids(collection: &StudyCollection, set: &[usize]) -> String {
    set.iter()
        .map(|&j| collection.study(j).id.as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Intercept variance: explicit flag, else pilot estimation, else an error.
fn resolve_sigma_alpha(collection: &StudyCollection, c: &Components) -> anyhow::Result<f64> {
    if let Some(sa) = c.sigma_alpha {
        if !(sa >= 0.0 && sa.is_finite()) {
            bail!(ipdmix::Error::InvalidInput(format!(
                "--sigma-alpha {sa} must be a finite non-negative number"
            )));
        }
        return Ok(sa);
    }
    let pilots: Vec<usize> = if !c.pilot.is_empty() {
        c.pilot
            .iter()
            .map(|id| index_of(collection, id))
            .collect::<ipdmix::Result<_>>()?
    } else if let Some(m) = c.pilot_count {
        let pool = ipd_indices(collection);
        if m > pool.len() {
            bail!(ipdmix::Error::InvalidInput(format!(
                "{m} pilots requested but only {} studies have IPD",
                pool.len()
            )));
        }
        let mut rng = rng::replicate_stream(c.seed, 0, DrawKind::Pilots);
        let mut chosen: Vec<usize> = index::sample(&mut rng, pool.len(), m)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        chosen.sort_unstable();
        chosen
    } else {
        bail!(ipdmix::Error::InvalidInput(
            "the intercept variance is needed: pass --sigma-alpha, --pilot or --pilot-count".into()
        ));
    };
    let studies: Vec<IpdStudy> = pilots
        .iter()
        .map(|&j| {
            collection.study(j).ipd.clone().ok_or_else(|| {
                ipdmix::Error::InvalidInput(format!(
                    "pilot study `{}` has no IPD",
                    collection.study(j).id
                ))
            })
        })
        .collect::<ipdmix::Result<_>>()?;
    let est = lmm::estimate_sigma_alpha(&studies, collection.kind())?;
    if est.truncated {
        warn!("pilot estimate of the intercept variance truncated at 0");
    }
    info!(
        "intercept variance {} from pilots {}",
        est.sigma_alpha_sq,
        ids(collection, &pilots)
    );
    Ok(est.sigma_alpha_sq)
}

fn lmm_components(
    collection: &StudyCollection,
    c: &Components,
    sigma_alpha_sq: f64,
) -> anyhow::Result<VarianceComponents> {
    let ads = ad_records(collection)?;
    let vc = if c.pooled_sigma {
        let pooled = lmm::pooled_sigma(&ads)?;
        if pooled.rejects_homogeneity() {
            warn!(
                "Bartlett test rejects equal error variances (p = {:.3}); consider per-study variances",
                pooled.p_value
            );
        }
        VarianceComponents::pooled(sigma_alpha_sq, pooled.sigma_sq)?
    } else {
        VarianceComponents::per_study(
            sigma_alpha_sq,
            ads.iter().map(lmm::estimate_sigma_j).collect(),
        )?
    };
    Ok(vc)
}

/// Selection weights `(u, v)` for every study.
fn weights(
    collection: &StudyCollection,
    model: Model,
    c: &Components,
    sigma_alpha_sq: f64,
) -> anyhow::Result<(Vec<f64>, Vec<f64>)> {
    Ok(match model {
        Model::Lmm => {
            let vc = lmm_components(collection, c, sigma_alpha_sq)?;
            let (n, pi) = collection.designs();
            select::selection_weights_lmm(&n, &pi, &vc)?
        }
        Model::Logistic => glmm::selection_weights_logistic(
            &ad_records(collection)?,
            sigma_alpha_sq,
            c.weights.into(),
        )?,
    })
}

/// Runs `method` over the studies in `pool` and maps the choice back to collection indices.
fn select_within(
    collection: &StudyCollection,
    pool: &[usize],
    (u, v): (&[f64], &[f64]),
    k1: usize,
    method: SelectionMethod,
) -> anyhow::Result<SelectionResult> {
    if k1 == 0 || k1 > pool.len() {
        bail!(ipdmix::Error::InvalidInput(format!(
            "k1 = {k1} must lie in 1..={}",
            pool.len()
        )));
    }
    let pu: Vec<f64> = pool.iter().map(|&j| u[j]).collect();
    let pv: Vec<f64> = pool.iter().map(|&j| v[j]).collect();
    let inst = SelectionInstance::new(pu, pv, k1)?;
    let mut result = match method {
        _ if k1 == 1 => {
            warn!("every single study gives the same objective; taking the first");
            SelectionResult {
                chosen: vec![0],
                objective: 0.0,
                method,
                indifferent: true,
            }
        }
        SelectionMethod::Exact => select::brute_force_select(&inst)?,
        SelectionMethod::Ssa => select::ssa_select(&inst)?,
        SelectionMethod::Extremes => {
            let (_, pi) = collection.designs();
            let ppi: Vec<f64> = pool.iter().map(|&j| pi[j]).collect();
            select::extremes_select(&ppi, k1)?
        }
    };
    if result.indifferent {
        warn!("all candidate studies carry the same information; the choice is arbitrary");
    }
    result.chosen = result.chosen.iter().map(|&i| pool[i]).collect();
    Ok(result)
}

struct Row {
    method: &'static str,
    ipd: Vec<usize>,
    beta_hat: f64,
    variance: f64,
    re: Option<f64>,
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn estimate(a: &EstimateArgs, run: &mut Run) -> anyhow::Result<()> {
    let collection = load_inputs(&a.inputs, run)?;
    let k = collection.len();
    let available = ipd_indices(&collection);
    let needs_selection = a.k1.is_some();
    let sigma_alpha_sq = match a.inputs.model {
        Model::Lmm => Some(resolve_sigma_alpha(&collection, &a.components)?),
        Model::Logistic if needs_selection => {
            Some(resolve_sigma_alpha(&collection, &a.components)?)
        }
        Model::Logistic => None,
    };
    run.manifest.seed = Some(a.components.seed);

    let s1: Vec<usize> = if !a.ipd_studies.is_empty() {
        let mut s: Vec<usize> = a
            .ipd_studies
            .iter()
            .map(|id| index_of(&collection, id))
            .collect::<ipdmix::Result<_>>()?;
        s.sort_unstable();
        s.dedup();
        if let Some(&j) = s.iter().find(|j| !available.contains(j)) {
            bail!(ipdmix::Error::InvalidInput(format!(
                "study `{}` has no IPD",
                collection.study(j).id
            )));
        }
        s
    } else if let Some(k1) = a.k1 {
        let (u, v) = weights(
            &collection,
            a.inputs.model,
            &a.components,
            sigma_alpha_sq.unwrap_or(0.0),
        )?;
        let mut chosen =
            select_within(&collection, &available, (&u, &v), k1, a.method.into())?.chosen;
        chosen.sort_unstable();
        chosen
    } else {
        available.clone()
    };
    let partition = Partition::new(k, &s1)?;
    let full_ipd = collection.has_all_ipd();

    let mut rows = Vec::new();
    let mut stdout = std::io::stdout().lock();
    match a.inputs.model {
        Model::Lmm => {
            let vc = lmm_components(&collection, &a.components, sigma_alpha_sq.unwrap())?;
            let (n, pi) = collection.designs();
            let re = |p: &Partition| lmm::relative_efficiency(&n, &pi, &vc, p);
            if full_ipd {
                let e = lmm::combined_estimate_lmm(&collection, &Partition::all_ipd(k), &vc)?;
                rows.push(Row {
                    method: "ipd_ma",
                    ipd: (0..k).collect(),
                    beta_hat: e.beta_hat,
                    variance: e.variance_beta,
                    re: Some(1.0),
                });
            }
            if s1.is_empty() {
                warn!("no IPD study in the combination: the intercept is not estimable, reporting AD-MA only");
            } else if s1.len() < k {
                let e = lmm::combined_estimate_lmm(&collection, &partition, &vc)?;
                rows.push(Row {
                    method: "ipd_ad_ma",
                    ipd: s1.clone(),
                    beta_hat: e.beta_hat,
                    variance: e.variance_beta,
                    re: Some(re(&partition)?),
                });
            }
            let e = lmm::ad_ma_estimate(&collection, &vc)?;
            rows.push(Row {
                method: "ad_ma",
                ipd: Vec::new(),
                beta_hat: e.beta_hat,
                variance: e.variance,
                re: Some(re(&Partition::all_ad(k))?),
            });

            let mut w = csv::Writer::from_writer(run.create("estimate.csv")?);
            w.write_record([
                "method",
                "ipd_studies",
                "k1",
                "beta_hat",
                "se",
                "variance",
                "re",
                "sigma_alpha_sq",
            ])?;
            for r in &rows {
                w.write_record([
                    r.method.to_string(),
                    ids(&collection, &r.ipd),
                    r.ipd.len().to_string(),
                    r.beta_hat.to_string(),
                    r.variance.sqrt().to_string(),
                    r.variance.to_string(),
                    opt(r.re),
                    vc.sigma_alpha_sq().to_string(),
                ])?;
            }
            w.flush()?;
        }
        Model::Logistic => {
            let options = GlmmOptions {
                independent: a.independent,
                ..Default::default()
            };
            let fit = |p: &Partition, o: &GlmmOptions| -> anyhow::Result<GlmmCombined> {
                let (fits, ads) = glmm::split_collection(&collection, p)?;
                Ok(glmm::combine_fits(&fits, &ads, o, p.clone())?)
            };
            // the richest available fit supplies the covariance used for every row
            let reference = if full_ipd {
                fit(&Partition::all_ipd(k), &options)?
            } else if !s1.is_empty() {
                fit(&partition, &options)?
            } else {
                fit(&Partition::all_ad(k), &options)?
            };
            if !reference.converged {
                warn!("variance-component search did not meet its tolerance");
            }
            if reference.boundary {
                warn!("random-effect covariance estimate is on the boundary");
            }
            let fixed = GlmmOptions {
                fixed_sigma: Some(reference.sigma_hat),
                ..options
            };
            let mut fitted = Vec::new();
            if full_ipd {
                fitted.push((
                    "ipd_ma",
                    (0..k).collect::<Vec<_>>(),
                    fit(&Partition::all_ipd(k), &fixed)?,
                ));
            }
            if !s1.is_empty() && s1.len() < k {
                fitted.push(("ipd_ad_ma", s1.clone(), fit(&partition, &fixed)?));
            }
            fitted.push(("ad_ma", Vec::new(), fit(&Partition::all_ad(k), &fixed)?));
            let ipd_var = full_ipd.then(|| fitted[0].2.variance_beta);

            let mut w = csv::Writer::from_writer(run.create("estimate.csv")?);
            w.write_record([
                "method",
                "ipd_studies",
                "k1",
                "beta_hat",
                "se",
                "variance",
                "re",
                "sigma_bb",
                "sigma_aa",
                "sigma_ba",
                "loglik",
            ])?;
            for (method, ipd, c) in &fitted {
                w.write_record([
                    method.to_string(),
                    ids(&collection, ipd),
                    ipd.len().to_string(),
                    c.beta_hat.to_string(),
                    c.variance_beta.sqrt().to_string(),
                    c.variance_beta.to_string(),
                    opt(ipd_var.map(|v| v / c.variance_beta)),
                    c.sigma_hat.bb.to_string(),
                    c.sigma_hat.aa.to_string(),
                    c.sigma_hat.ba.to_string(),
                    c.loglik.to_string(),
                ])?;
                rows.push(Row {
                    method,
                    ipd: ipd.clone(),
                    beta_hat: c.beta_hat,
                    variance: c.variance_beta,
                    re: ipd_var.map(|v| v / c.variance_beta),
                });
            }
            w.flush()?;
        }
    }
    for r in &rows {
        writeln!(
            stdout,
            "{:<10} beta = {:>10.5}  se = {:.5}  variance = {:.5}{}",
            r.method,
            r.beta_hat,
            r.variance.sqrt(),
            r.variance,
            r.re.map(|x| format!("  RE = {x:.4}")).unwrap_or_default()
        )?;
    }
    Ok(())
}

pub fn select_cmd(a: &SelectArgs, run: &mut Run) -> anyhow::Result<()> {
    let collection = load_inputs(&a.inputs, run)?;
    if a.method == crate::args::Method::Extremes && a.inputs.model != Model::Lmm {
        bail!(ipdmix::Error::InvalidInput(
            "the extremes rule applies to the linear model".into()
        ));
    }
    let sigma_alpha_sq = resolve_sigma_alpha(&collection, &a.components)?;
    run.manifest.seed = Some(a.components.seed);
    let (u, v) = weights(&collection, a.inputs.model, &a.components, sigma_alpha_sq)?;
    let all: Vec<usize> = (0..collection.len()).collect();
    let result = select_within(&collection, &all, (&u, &v), a.k1, a.method.into())?;

    let re = match a.inputs.model {
        Model::Lmm => {
            let vc = lmm_components(&collection, &a.components, sigma_alpha_sq)?;
            let (n, pi) = collection.designs();
            Some(lmm::relative_efficiency(
                &n,
                &pi,
                &vc,
                &Partition::new(collection.len(), &result.chosen)?,
            )?)
        }
        Model::Logistic => None,
    };

    let mut w = csv::Writer::from_writer(run.create("selection.csv")?);
    w.write_record(["study_id", "position", "u", "v", "selected"])?;
    for j in 0..collection.len() {
        w.write_record([
            collection.study(j).id.clone(),
            (j + 1).to_string(),
            u[j].to_string(),
            v[j].to_string(),
            result.chosen.contains(&j).to_string(),
        ])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_writer(run.create("selection_summary.csv")?);
    w.write_record([
        "method",
        "k1",
        "objective",
        "re",
        "indifferent",
        "sigma_alpha_sq",
        "chosen",
    ])?;
    w.write_record([
        result.method.to_string(),
        a.k1.to_string(),
        result.objective.to_string(),
        opt(re),
        result.indifferent.to_string(),
        sigma_alpha_sq.to_string(),
        ids(&collection, &result.chosen),
    ])?;
    w.flush()?;
    println!(
        "{} selection of {} studies: {} (objective {:.6}{})",
        result.method,
        a.k1,
        ids(&collection, &result.chosen),
        result.objective,
        re.map(|x| format!(", RE {x:.4}")).unwrap_or_default()
    );
    Ok(())
}

pub fn re_curve(a: &ReCurveArgs, run: &mut Run) -> anyhow::Result<()> {
    if a.inputs.model != Model::Lmm {
        bail!(ipdmix::Error::InvalidInput(
            "re-curve is defined for the linear model".into()
        ));
    }
    let collection = load_inputs(&a.inputs, run)?;
    let sigma_alpha_sq = resolve_sigma_alpha(&collection, &a.components)?;
    let vc = lmm_components(&collection, &a.components, sigma_alpha_sq)?;
    let (n, pi) = collection.designs();
    let k = collection.len();
    let range = match &a.k1_range {
        Some(s) => {
            parse_k1_range(s, k).map_err(|e| ipdmix::Error::InvalidInput(format!("{e:#}")))?
        }
        None => (1..=k).collect(),
    };
    let rows = select::re_curve(&n, &pi, &vc, &range, a.method.into(), a.cap)?;
    sim::write_re_curve_csv(&rows, run.create("re_curve.csv")?)?;
    if a.landscape {
        sim::write_re_landscape_csv(&n, &pi, &vc, &range, a.cap, run.create("re_landscape.csv")?)?;
    }
    for r in &rows {
        println!(
            "k1 = {:>3}  max RE = {:.4}{}",
            r.k1,
            r.max_re,
            r.min_re
                .map(|x| format!("  min RE = {x:.4}"))
                .unwrap_or_default()
        );
    }
    Ok(())
}

pub fn simulate(a: &SimulateArgs, run: &mut Run) -> anyhow::Result<()> {
    if a.scenario == "beta_blocker" {
        return trial_workflow(a, run);
    }
    let mut config = ScenarioConfig::preset(&a.scenario)?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    if let Some(reps) = a.reps {
        config.replicates = reps;
    }
    if let Some(k1) = a.k1 {
        config.k1_range = vec![k1];
    }
    config.workers = a.common.workers;
    config.validate()?;
    run.manifest.seed = Some(config.seed);
    run.manifest.config_hash = Some(config.config_hash());
    run.manifest.scenario = Some(serde_json::to_value(&config)?);

    match config.kind {
        _ if config.estimated_components => {
            let report = sim::run_sensitivity_experiment(&config)?;
            report.write_csv(run.create("sensitivity.csv")?)?;
            println!(
                "overlap of at least {} with the known-component choice in {:.1}% of {} replicates ({} pilot failures)",
                report.k1.saturating_sub(1),
                100.0 * report.rate_at_least(report.k1.saturating_sub(1)),
                config.replicates,
                report.estimation_failures
            );
        }
        ScenarioKind::UniformPi | ScenarioKind::BathtubPi => {
            let PiSource::Fixed(pi) = &config.pi else {
                bail!(ipdmix::Error::InvalidInput(
                    "fixed-design scenario without fixed proportions".into()
                ));
            };
            let SigmaSource::Fixed(s2) = config.sigma else {
                bail!(ipdmix::Error::InvalidInput(
                    "fixed-design scenario without a fixed error variance".into()
                ));
            };
            let n: Vec<usize> = (0..config.k).map(|j| config.n_j(j)).collect();
            let vc = VarianceComponents::pooled(config.sigma_alpha_sq, s2)?;
            let cap = config.enumeration_cap;
            let rows =
                select::re_curve(&n, pi, &vc, &config.k1_range, SelectionMethod::Exact, cap)?;
            sim::write_re_curve_csv(&rows, run.create("re_curve.csv")?)?;
            sim::write_re_landscape_csv(
                &n,
                pi,
                &vc,
                &config.k1_range,
                cap,
                run.create("re_landscape.csv")?,
            )?;
            for r in &rows {
                println!(
                    "k1 = {:>3}  max RE = {:.4}  min RE = {:.4}",
                    r.k1,
                    r.max_re,
                    r.min_re.unwrap_or(f64::NAN)
                );
            }
        }
        ScenarioKind::MixturePi => {
            let report = sim::run_match_experiment(&config)?;
            report.write_csv(run.create("match.csv")?)?;
            for (i, k1) in report.k1.iter().enumerate() {
                println!(
                    "k1 = {:>3}  exact match {:.2}  mean ratio {:.5}",
                    k1,
                    report.exact_rate(i),
                    report.mean_ratio[i]
                );
            }
        }
        ScenarioKind::GlmmLogistic => {
            let report = sim::run_glmm_experiment(&config)?;
            report.write_csv(run.create("logistic.csv")?)?;
            for r in &report.rows {
                println!(
                    "IPD fraction {:.1}  estimate {:.4}  bias {:.4}  MSE {:.4}  RE {:.3}",
                    r.ipd_fraction, r.estimate, r.bias, r.mse, r.rel_eff
                );
            }
            if report.failures > 0 {
                warn!(
                    "{} replicates failed to fit and were dropped",
                    report.failures
                );
            }
        }
    }
    Ok(())
}

fn trial_workflow(a: &SimulateArgs, run: &mut Run) -> anyhow::Result<()> {
    let path = a.ad.as_ref().ok_or_else(|| {
        anyhow!(ipdmix::Error::InvalidInput(
            "beta_blocker needs --ad".into()
        ))
    })?;
    run.record_input(path)?;
    let trials = load_ad(path, OutcomeKind::Binary)?;
    let mut config = SubsampleConfig {
        weight_mode: a.weights.into(),
        ..Default::default()
    };
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    if let Some(k1) = a.k1 {
        config.k1 = k1;
    }
    run.manifest.seed = Some(config.seed);
    let report = sim::run_subsample_workflow(&trials, &config)?;
    report.write_csv(run.create("workflow.csv")?)?;
    for r in &report.rows {
        println!(
            "{:<8} variance {:.4}  beta {:.4}",
            r.label, r.variance, r.beta_hat
        );
    }
    println!(
        "share of the AD-to-IPD gap recovered: {:.2}",
        report.gap_recovered()
    );
    Ok(())
}

pub fn summarize(a: &SummarizeArgs, run: &mut Run) -> anyhow::Result<()> {
    run.record_input(&a.ipd)?;
    let kind = a.model.outcome();
    let collection =
        load_ipd(&a.ipd, kind).with_context(|| format!("loading {}", a.ipd.display()))?;
    let ads: Vec<AdStudy> = collection
        .studies()
        .iter()
        .map(|s| summarize_ipd(s.ipd.as_ref().expect("IPD file"), kind))
        .collect::<ipdmix::Result<_>>()?;
    write_ad_records(&ads.iter().collect::<Vec<_>>(), run.create("summary.csv")?)?;
    println!("summarized {} studies", ads.len());
    Ok(())
}
