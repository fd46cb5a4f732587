//! Seeded Monte Carlo experiments.
//!
//! Replicates run in parallel on a dedicated rayon pool, but every draw comes
//! from a stream addressed by `(seed, replicate, study, kind)` (see
//! [`crate::rng`]) and results are aggregated in replicate order, so reports
//! are bit-identical for any worker count.

use std::io::Write;

use log::warn;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{summarize_ipd, AdStudy, IpdStudy, OutcomeKind, Partition, StudyCollection};
use crate::error::{Error, Result};
use crate::glmm::{self, GlmmOptions, GlmmStudyFit, RandomEffectCov, WeightMode};
use crate::lmm::{self, VarianceComponents};
use crate::rng::{self, DrawKind};
use crate::select::{self, SelectionInstance};

pub const UNIFORM_PI: [f64; 10] = [0.1, 0.2, 0.3, 0.3, 0.3, 0.5, 0.6, 0.6, 0.8, 0.8];
pub const BATHTUB_PI: [f64; 10] = [0.1, 0.1, 0.1, 0.1, 0.2, 0.8, 0.9, 0.9, 0.9, 0.9];

/// Redraw budget per study when a simulated binary study cannot be fitted.
const MAX_REDRAWS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    UniformPi,
    BathtubPi,
    MixturePi,
    GlmmLogistic,
}

/// Where treatment proportions come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PiSource {
    Fixed(Vec<f64>),
    Uniform,
    /// `0.5 Beta(2, 9) + 0.5 Beta(9, 2)`
    BetaMixture,
}

/// Where within-study error variances come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaSource {
    Fixed(f64),
    /// One inverse-gamma draw per replicate, shared by all studies.
    InvGammaShared {
        shape: f64,
        scale: f64,
    },
    /// Independent inverse-gamma draws per study.
    InvGammaPerStudy {
        shape: f64,
        scale: f64,
    },
}

impl SigmaSource {
    pub fn heterogeneous(&self) -> bool {
        matches!(self, SigmaSource::InvGammaPerStudy { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub kind: ScenarioKind,
    pub k: usize,
    /// Participants per study; a single entry applies to every study.
    pub n: Vec<usize>,
    pub alpha: f64,
    pub beta: f64,
    pub sigma_alpha_sq: f64,
    /// Treatment-effect variance (logistic scenarios only).
    pub sigma_beta_sq: f64,
    pub sigma: SigmaSource,
    pub pi: PiSource,
    pub replicates: u64,
    pub seed: u64,
    pub k1_range: Vec<usize>,
    /// Pilot IPD studies used to estimate the intercept variance.
    pub pilots: usize,
    /// Use estimated rather than true variance components where applicable.
    pub estimated_components: bool,
    /// IPD fractions of the logistic experiment.
    pub ipd_fractions: Vec<f64>,
    /// Largest subset count the exact selector may face.
    pub enumeration_cap: u64,
    /// Worker threads; `None` uses all cores. Not part of the config hash.
    #[serde(skip)]
    pub workers: Option<usize>,
}

impl ScenarioConfig {
    fn base(name: &str, kind: ScenarioKind, k: usize, n: usize) -> Self {
        Self {
            name: name.to_string(),
            kind,
            k,
            n: vec![n],
            alpha: 0.5,
            beta: 1.5,
            sigma_alpha_sq: 0.025,
            sigma_beta_sq: 0.0,
            sigma: SigmaSource::Fixed(2.5),
            pi: PiSource::Uniform,
            replicates: 1,
            seed: 1,
            k1_range: (1..=k).collect(),
            pilots: 0,
            estimated_components: false,
            ipd_fractions: Vec::new(),
            enumeration_cap: select::DEFAULT_ENUMERATION_CAP,
            workers: None,
        }
    }

    /// Ten studies of ten participants with roughly uniform proportions.
    pub fn uniform_design() -> Self {
        Self {
            pi: PiSource::Fixed(UNIFORM_PI.to_vec()),
            ..Self::base("uniform_pi", ScenarioKind::UniformPi, 10, 10)
        }
    }

    /// Ten studies of ten participants with extreme proportions.
    pub fn bathtub_pi() -> Self {
        Self {
            pi: PiSource::Fixed(BATHTUB_PI.to_vec()),
            ..Self::base("bathtub_pi", ScenarioKind::BathtubPi, 10, 10)
        }
    }

    /// Sequential versus exact selection with mixture proportions and
    /// inverse-gamma error variances.
    pub fn mixture_match(k: usize) -> Self {
        Self {
            sigma: SigmaSource::InvGammaPerStudy {
                shape: 2.0,
                scale: 5.0,
            },
            pi: PiSource::BetaMixture,
            replicates: 100,
            k1_range: (2..=10.min(k)).collect(),
            // 30 choose 10 is about 3e7; the pruned search visits far fewer
            enumeration_cap: 1_000_000_000,
            ..Self::base("mixture_match", ScenarioKind::MixturePi, k, 10)
        }
    }

    /// Selection under estimated versus known variance components.
    pub fn sensitivity(heterogeneous: bool) -> Self {
        let (name, sigma) = if heterogeneous {
            (
                "sensitivity_heterogeneous",
                SigmaSource::InvGammaPerStudy {
                    shape: 2.0,
                    scale: 5.0,
                },
            )
        } else {
            (
                "sensitivity_homogeneous",
                SigmaSource::InvGammaShared {
                    shape: 2.0,
                    scale: 5.0,
                },
            )
        };
        Self {
            sigma,
            pi: PiSource::Fixed(BATHTUB_PI.to_vec()),
            replicates: 10_000,
            k1_range: vec![5],
            pilots: 5,
            estimated_components: true,
            ..Self::base(name, ScenarioKind::BathtubPi, 10, 50)
        }
    }

    /// Logistic mixed model with independent random slope and intercept.
    pub fn logistic(k: usize, n: usize) -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            sigma_alpha_sq: 0.5,
            sigma_beta_sq: 0.5,
            sigma: SigmaSource::Fixed(0.0),
            pi: PiSource::Uniform,
            replicates: 200,
            k1_range: Vec::new(),
            ipd_fractions: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            ..Self::base(
                &format!("logistic_k{k}_n{n}"),
                ScenarioKind::GlmmLogistic,
                k,
                n,
            )
        }
    }

    /// Preset by name: `uniform_pi`, `bathtub_pi`, `mixture_match`,
    /// `mixture_match_k10`, `sensitivity_homogeneous`,
    /// `sensitivity_heterogeneous`, `logistic_k<K>_n<N>`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "uniform_pi" => Ok(Self::uniform_design()),
            "bathtub_pi" => Ok(Self::bathtub_pi()),
            "mixture_match" => Ok(Self::mixture_match(30)),
            "mixture_match_k10" => Ok(Self {
                name: name.into(),
                ..Self::mixture_match(10)
            }),
            "sensitivity_homogeneous" => Ok(Self::sensitivity(false)),
            "sensitivity_heterogeneous" => Ok(Self::sensitivity(true)),
            other => {
                let parsed = other.strip_prefix("logistic_k").and_then(|rest| {
                    let (k, n) = rest.split_once("_n")?;
                    Some((k.parse().ok()?, n.parse().ok()?))
                });
                match parsed {
                    Some((k, n)) => Ok(Self::logistic(k, n)),
                    None => Err(Error::InvalidInput(format!("unknown scenario `{other}`"))),
                }
            }
        }
    }

    pub fn n_j(&self, j: usize) -> usize {
        if self.n.len() == 1 {
            self.n[0]
        } else {
            self.n[j]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.k < 2 {
            return bad(format!("k = {} must be at least 2", self.k));
        }
        if self.n.len() != 1 && self.n.len() != self.k {
            return bad(format!(
                "{} study sizes given for k = {}",
                self.n.len(),
                self.k
            ));
        }
        if self.n.iter().any(|&n| n < 2) {
            return bad("every study needs at least 2 participants".into());
        }
        if self.replicates == 0 {
            return bad("replicates must be positive".into());
        }
        if !(self.sigma_alpha_sq >= 0.0 && self.sigma_beta_sq >= 0.0) {
            return bad("random-effect variances must be non-negative".into());
        }
        match &self.pi {
            PiSource::Fixed(p) if p.len() != self.k => {
                return bad(format!("{} proportions given for k = {}", p.len(), self.k))
            }
            PiSource::Fixed(p) if p.iter().any(|&x| !(x > 0.0 && x < 1.0)) => {
                return bad("proportions must lie in (0, 1)".into())
            }
            _ => {}
        }
        match self.sigma {
            SigmaSource::Fixed(s) if !(s >= 0.0) => {
                return bad("error variance must be non-negative".into())
            }
            SigmaSource::InvGammaShared { shape, scale }
            | SigmaSource::InvGammaPerStudy { shape, scale }
                if !(shape > 0.0 && scale > 0.0) =>
            {
                return bad("inverse-gamma parameters must be positive".into())
            }
            _ => {}
        }
        if self.k1_range.iter().any(|&k1| k1 == 0 || k1 > self.k) {
            return bad("k1 values must lie in 1..=k".into());
        }
        if self.pilots > self.k {
            return bad("more pilots than studies".into());
        }
        if self.ipd_fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return bad("IPD fractions must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, excluding the worker count.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            scenario: self.name.clone(),
            seed: self.seed,
            replicates: self.replicates,
            config_hash: self.config_hash(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub scenario: String,
    pub seed: u64,
    pub replicates: u64,
    pub config_hash: String,
}

fn run_replicates<T, F>(replicates: u64, workers: Option<usize>, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::InvalidInput(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(|| (0..replicates).into_par_iter().map(f).collect()))
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn draw_pi(source: &PiSource, j: usize, rng: &mut ChaCha8Rng) -> f64 {
    match source {
        PiSource::Fixed(p) => p[j],
        PiSource::Uniform => rng.random::<f64>(),
        PiSource::BetaMixture => {
            let (a, b) = if rng.random::<f64>() < 0.5 {
                (2.0, 9.0)
            } else {
                (9.0, 2.0)
            };
            Beta::new(a, b).expect("valid beta").sample(rng)
        }
    }
}

fn inv_gamma(shape: f64, scale: f64, rng: &mut ChaCha8Rng) -> f64 {
    1.0 / Gamma::new(shape, 1.0 / scale)
        .expect("valid gamma")
        .sample(rng)
}

/// Proportions and error variances for one replicate.
pub fn draw_design(config: &ScenarioConfig, replicate: u64) -> (Vec<f64>, Vec<f64>) {
    let pi = (0..config.k)
        .map(|j| {
            draw_pi(
                &config.pi,
                j,
                &mut rng::stream(config.seed, replicate, j as u64, DrawKind::Design),
            )
        })
        .collect();
    let sigma_sq = match config.sigma {
        SigmaSource::Fixed(s) => vec![s; config.k],
        SigmaSource::InvGammaShared { shape, scale } => {
            let mut r = rng::replicate_stream(config.seed, replicate, DrawKind::Variance);
            vec![inv_gamma(shape, scale, &mut r); config.k]
        }
        SigmaSource::InvGammaPerStudy { shape, scale } => (0..config.k)
            .map(|j| {
                inv_gamma(
                    shape,
                    scale,
                    &mut rng::stream(config.seed, replicate, j as u64, DrawKind::Variance),
                )
            })
            .collect(),
    };
    (pi, sigma_sq)
}

/// Treated participants realizing proportion `pi` in a study of `n`.
pub fn arm_count(n: usize, pi: f64) -> usize {
    ((n as f64 * pi).round() as usize).clamp(1, n - 1)
}

fn assignment(n: usize, pi: f64) -> Vec<bool> {
    let n_t = arm_count(n, pi);
    (0..n).map(|i| i < n_t).collect()
}

#[derive(Debug, Clone)]
pub struct LmmDataset {
    pub collection: StudyCollection,
    /// Proportions as drawn; the realized ones are `n_t / n`.
    pub pi: Vec<f64>,
    pub sigma_sq: Vec<f64>,
}

/// Continuous IPD for every study: `y = alpha_j + beta x + e`.
pub fn gen_lmm_dataset(config: &ScenarioConfig, replicate: u64) -> Result<LmmDataset> {
    let (pi, sigma_sq) = draw_design(config, replicate);
    let mut collection = StudyCollection::new(OutcomeKind::Continuous);
    for j in 0..config.k {
        let n = config.n_j(j);
        let x = assignment(n, pi[j]);
        let mut eff = rng::stream(config.seed, replicate, j as u64, DrawKind::Effects);
        let alpha_j = config.alpha + config.sigma_alpha_sq.sqrt() * normal(&mut eff);
        let mut noise = rng::stream(config.seed, replicate, j as u64, DrawKind::Responses);
        let sd = sigma_sq[j].sqrt();
        let y = x
            .iter()
            .map(|&t| alpha_j + if t { config.beta } else { 0.0 } + sd * normal(&mut noise))
            .collect();
        collection.push_ipd(IpdStudy::new(
            format!("s{}", j + 1),
            y,
            x,
            OutcomeKind::Continuous,
        )?)?;
    }
    Ok(LmmDataset {
        collection,
        pi,
        sigma_sq,
    })
}

#[derive(Debug, Clone)]
pub struct LogisticDataset {
    pub collection: StudyCollection,
    pub fits: Vec<GlmmStudyFit>,
    /// Studies redrawn because their logistic fit was impossible.
    pub redraws: u64,
}

fn ad_from_fit(fit: &GlmmStudyFit, study: &IpdStudy) -> Result<AdStudy> {
    AdStudy::new(
        study.id(),
        fit.beta_hat,
        fit.variance_beta()?,
        study.n_treated() as u64,
        study.n_control() as u64,
        Some(study.case_counts()),
    )
}

/// Binary IPD for every study from the logistic model with random
/// `(beta_j, alpha_j)`. Studies whose logistic fit is impossible (an arm
/// without events or without non-events) are redrawn from their own stream.
pub fn gen_logistic_dataset(config: &ScenarioConfig, replicate: u64) -> Result<LogisticDataset> {
    let mut collection = StudyCollection::new(OutcomeKind::Binary);
    let mut fits = Vec::with_capacity(config.k);
    let mut redraws = 0;
    for j in 0..config.k {
        let n = config.n_j(j);
        let mut design = rng::stream(config.seed, replicate, j as u64, DrawKind::Design);
        let mut eff = rng::stream(config.seed, replicate, j as u64, DrawKind::Effects);
        let mut resp = rng::stream(config.seed, replicate, j as u64, DrawKind::Responses);
        let mut attempt = 0;
        let (study, fit) = loop {
            let pi = draw_pi(&config.pi, j, &mut design);
            let beta_j = config.beta + config.sigma_beta_sq.sqrt() * normal(&mut eff);
            let alpha_j = config.alpha + config.sigma_alpha_sq.sqrt() * normal(&mut eff);
            let x = assignment(n, pi);
            let y = x
                .iter()
                .map(|&t| {
                    let p = 1.0 / (1.0 + (-(alpha_j + if t { beta_j } else { 0.0 })).exp());
                    if resp.random::<f64>() < p {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            let study = IpdStudy::new(format!("s{}", j + 1), y, x, OutcomeKind::Binary)?;
            match glmm::fit_study_logistic(&study) {
                Ok(fit) => break (study, fit),
                Err(Error::Separation { .. }) if attempt < MAX_REDRAWS => {
                    attempt += 1;
                    redraws += 1;
                }
                Err(e) => return Err(e),
            }
        };
        collection.push_ipd(study)?;
        fits.push(fit);
    }
    Ok(LogisticDataset {
        collection,
        fits,
        redraws,
    })
}

/// Overlap counts and variance ratios of the sequential selector against the
/// exact optimum.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchReport {
    pub provenance: Provenance,
    pub k1: Vec<usize>,
    /// `counts[i][m]`: replicates where the two sets share `m` studies at `k1[i]`.
    pub counts: Vec<Vec<u64>>,
    /// Mean of `var(sequential set) / var(optimal set)`.
    pub mean_ratio: Vec<f64>,
    pub max_ratio: Vec<f64>,
    /// Replicates where every subset scores the same.
    pub indifferent: Vec<u64>,
}

impl MatchReport {
    pub fn exact_rate(&self, i: usize) -> f64 {
        self.counts[i][self.k1[i]] as f64 / self.provenance.replicates as f64
    }

    /// Table of overlap counts with one column per `k1` and a closing
    /// mean-ratio row.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["count_match".to_string()];
        header.extend(self.k1.iter().map(|k1| format!("k1_{k1}")));
        w.write_record(&header).map_err(csv_err)?;
        let max = self.k1.iter().copied().max().unwrap_or(0);
        for m in 0..=max {
            let mut row = vec![m.to_string()];
            row.extend(self.k1.iter().zip(&self.counts).map(|(&k1, c)| {
                if m <= k1 {
                    c[m].to_string()
                } else {
                    String::new()
                }
            }));
            w.write_record(&row).map_err(csv_err)?;
        }
        let mut row = vec!["mean_ratio".to_string()];
        row.extend(self.mean_ratio.iter().map(f64::to_string));
        w.write_record(&row).map_err(csv_err)?;
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidInput(format!("{other:?}")),
    }
}

/// Sequential selector versus exact search under known variance components.
pub fn run_match_experiment(config: &ScenarioConfig) -> Result<MatchReport> {
    config.validate()?;
    if config.kind == ScenarioKind::GlmmLogistic {
        return Err(Error::InvalidInput(
            "the match experiment needs a linear scenario".into(),
        ));
    }
    if config.k1_range.iter().any(|&k1| k1 < 2) {
        return Err(Error::InvalidInput(
            "the sequential selector needs k1 >= 2".into(),
        ));
    }
    let n: Vec<usize> = (0..config.k).map(|j| config.n_j(j)).collect();
    let per_rep = run_replicates(
        config.replicates,
        config.workers,
        |r| -> Result<Vec<(usize, f64, bool)>> {
            let (pi, sigma_sq) = draw_design(config, r);
            let vc = VarianceComponents::per_study(config.sigma_alpha_sq, sigma_sq)?;
            let (u, v) = select::selection_weights_lmm(&n, &pi, &vc)?;
            config
                .k1_range
                .iter()
                .map(|&k1| {
                    let inst = SelectionInstance::new(u.clone(), v.clone(), k1)?;
                    let best = select::brute_force_select_capped(&inst, config.enumeration_cap)?;
                    let seq = select::ssa_select(&inst)?;
                    let overlap = seq
                        .chosen
                        .iter()
                        .filter(|j| best.chosen.contains(j))
                        .count();
                    let ratio = lmm::variance_combined(&n, &pi, &vc, &seq.chosen)?
                        / lmm::variance_combined(&n, &pi, &vc, &best.chosen)?;
                    Ok((overlap, ratio, best.indifferent))
                })
                .collect()
        },
    )?;

    let m = config.k1_range.len();
    let mut counts: Vec<Vec<u64>> = config.k1_range.iter().map(|&k1| vec![0; k1 + 1]).collect();
    let mut ratio_sum = vec![0.0; m];
    let mut max_ratio = vec![0.0f64; m];
    let mut indifferent = vec![0; m];
    for rep in per_rep {
        for (i, (overlap, ratio, indiff)) in rep?.into_iter().enumerate() {
            counts[i][overlap] += 1;
            ratio_sum[i] += ratio;
            max_ratio[i] = max_ratio[i].max(ratio);
            indifferent[i] += indiff as u64;
        }
    }
    let reps = config.replicates as f64;
    Ok(MatchReport {
        provenance: config.provenance(),
        k1: config.k1_range.clone(),
        counts,
        mean_ratio: ratio_sum.iter().map(|s| s / reps).collect(),
        max_ratio,
        indifferent,
    })
}

/// Overlap between the selection under true components and the selection
/// under components estimated from the data.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityReport {
    pub provenance: Provenance,
    pub k1: usize,
    pub heterogeneous: bool,
    /// `counts[m]`: replicates where the two sets share `m` studies.
    pub counts: Vec<u64>,
    /// Replicates whose intercept-variance search failed; they fall back to 0.
    pub estimation_failures: u64,
}

impl SensitivityReport {
    /// Fraction of replicates with overlap of at least `m`.
    pub fn rate_at_least(&self, m: usize) -> f64 {
        self.counts[m.min(self.k1 + 1)..].iter().sum::<u64>() as f64
            / self.provenance.replicates as f64
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let regime = if self.heterogeneous {
            "heterogeneous"
        } else {
            "homogeneous"
        };
        w.write_record(["count_match", regime]).map_err(csv_err)?;
        for (m, c) in self.counts.iter().enumerate() {
            w.write_record([m.to_string(), c.to_string()])
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Exact selection with true components versus the sequential selector with
/// error variances estimated from each study's summary (pooled when the
/// scenario is homogeneous) and the intercept variance from random pilots.
pub fn run_sensitivity_experiment(config: &ScenarioConfig) -> Result<SensitivityReport> {
    config.validate()?;
    let &[k1] = config.k1_range.as_slice() else {
        return Err(Error::InvalidInput(
            "the sensitivity experiment takes exactly one k1".into(),
        ));
    };
    if k1 < 2 {
        return Err(Error::InvalidInput(
            "the sequential selector needs k1 >= 2".into(),
        ));
    }
    if config.estimated_components && config.pilots < 2 {
        return Err(Error::InvalidInput(
            "at least 2 pilot studies are required".into(),
        ));
    }
    let heterogeneous = config.sigma.heterogeneous();
    let per_rep = run_replicates(
        config.replicates,
        config.workers,
        |r| -> Result<(usize, bool)> {
            let data = gen_lmm_dataset(config, r)?;
            let (n, pi) = data.collection.designs();
            let truth =
                VarianceComponents::per_study(config.sigma_alpha_sq, data.sigma_sq.clone())?;
            let (u, v) = select::selection_weights_lmm(&n, &pi, &truth)?;
            let best = select::brute_force_select_capped(
                &SelectionInstance::new(u, v, k1)?,
                config.enumeration_cap,
            )?;

            let mut failed = false;
            let estimated = if config.estimated_components {
                let ads = data
                    .collection
                    .studies()
                    .iter()
                    .map(|s| {
                        summarize_ipd(
                            s.ipd.as_ref().expect("simulated IPD"),
                            OutcomeKind::Continuous,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                let sigma_sq = if heterogeneous {
                    ads.iter().map(lmm::estimate_sigma_j).collect()
                } else {
                    vec![lmm::pooled_sigma(&ads)?.sigma_sq; ads.len()]
                };
                let mut prng = rng::replicate_stream(config.seed, r, DrawKind::Pilots);
                let mut pilot_idx = index::sample(&mut prng, config.k, config.pilots).into_vec();
                pilot_idx.sort_unstable();
                let pilots: Vec<IpdStudy> = pilot_idx
                    .iter()
                    .map(|&j| data.collection.study(j).ipd.clone().expect("simulated IPD"))
                    .collect();
                let sa = match lmm::estimate_sigma_alpha(&pilots, OutcomeKind::Continuous) {
                    Ok(est) => est.sigma_alpha_sq,
                    Err(Error::NoConvergence { .. }) => {
                        failed = true;
                        0.0
                    }
                    Err(e) => return Err(e),
                };
                VarianceComponents::per_study(sa, sigma_sq)?
            } else {
                truth
            };
            let (u, v) = select::selection_weights_lmm(&n, &pi, &estimated)?;
            let seq = select::ssa_select(&SelectionInstance::new(u, v, k1)?)?;
            let overlap = seq
                .chosen
                .iter()
                .filter(|j| best.chosen.contains(j))
                .count();
            Ok((overlap, failed))
        },
    )?;

    let mut counts = vec![0; k1 + 1];
    let mut estimation_failures = 0;
    for rep in per_rep {
        let (overlap, failed) = rep?;
        counts[overlap] += 1;
        estimation_failures += failed as u64;
    }
    if estimation_failures > 0 {
        warn!("{estimation_failures} replicates fell back to zero intercept variance");
    }
    Ok(SensitivityReport {
        provenance: config.provenance(),
        k1,
        heterogeneous,
        counts,
        estimation_failures,
    })
}

/// One row of the logistic experiment: an IPD fraction and its metrics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GlmmRow {
    pub ipd_fraction: f64,
    pub k1: usize,
    pub estimate: f64,
    pub bias: f64,
    /// Standard deviation of the estimates across replicates.
    pub std_error: f64,
    pub mse: f64,
    /// Mean of the model-based variance of the combined estimate.
    pub mean_variance: f64,
    /// Mean model variance of the all-IPD estimator over this row's.
    pub rel_eff: f64,
    /// Same ratio with Monte Carlo variances.
    pub rel_eff_empirical: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlmmReport {
    pub provenance: Provenance,
    pub rows: Vec<GlmmRow>,
    /// IPD studies of each row, zero-based.
    pub partitions: Vec<Vec<usize>>,
    pub redraws: u64,
    /// Replicates dropped because some row failed to fit.
    pub failures: u64,
}

impl GlmmReport {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for row in &self.rows {
            w.serialize(row).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Nested random partitions: one shuffled study order shared by all rows.
fn fraction_partitions(config: &ScenarioConfig) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..config.k).collect();
    order.shuffle(&mut rng::replicate_stream(
        config.seed,
        rng::SHARED,
        DrawKind::Partition,
    ));
    config
        .ipd_fractions
        .iter()
        .map(|f| {
            let k1 = (f * config.k as f64).round() as usize;
            let mut ipd = order[..k1].to_vec();
            ipd.sort_unstable();
            ipd
        })
        .collect()
}

/// Logistic experiment: for each IPD fraction, one random partition fixed
/// across replicates, estimated with independent random effects.
pub fn run_glmm_experiment(config: &ScenarioConfig) -> Result<GlmmReport> {
    config.validate()?;
    if config.kind != ScenarioKind::GlmmLogistic {
        return Err(Error::InvalidInput(
            "the logistic experiment needs a logistic scenario".into(),
        ));
    }
    if config.ipd_fractions.is_empty() {
        return Err(Error::InvalidInput("no IPD fractions configured".into()));
    }
    let partitions = fraction_partitions(config);
    let options = GlmmOptions {
        independent: true,
        ..Default::default()
    };
    let per_rep = run_replicates(
        config.replicates,
        config.workers,
        |r| -> Result<(u64, Option<Vec<(f64, f64)>>)> {
            let data = gen_logistic_dataset(config, r)?;
            let studies = data.collection.studies();
            let ads = data
                .fits
                .iter()
                .zip(studies)
                .map(|(fit, s)| ad_from_fit(fit, s.ipd.as_ref().expect("simulated IPD")))
                .collect::<Result<Vec<_>>>()?;
            let mut out = Vec::with_capacity(partitions.len());
            for ipd in &partitions {
                let part = Partition::new(config.k, ipd)?;
                let fits: Vec<GlmmStudyFit> =
                    part.ipd().iter().map(|&j| data.fits[j].clone()).collect();
                let rest: Vec<AdStudy> = part.ad().iter().map(|&j| ads[j].clone()).collect();
                match glmm::combine_fits(&fits, &rest, &options, part) {
                    Ok(c) => out.push((c.beta_hat, c.variance_beta)),
                    Err(e) => {
                        log::debug!("replicate {r} dropped: {e}");
                        return Ok((data.redraws, None));
                    }
                }
            }
            Ok((data.redraws, Some(out)))
        },
    )?;

    let mut redraws = 0;
    let mut failures = 0;
    let mut kept: Vec<Vec<(f64, f64)>> = Vec::new();
    for rep in per_rep {
        let (d, rows) = rep?;
        redraws += d;
        match rows {
            Some(rows) => kept.push(rows),
            None => failures += 1,
        }
    }
    if kept.is_empty() {
        return Err(Error::NotEstimable("every replicate failed to fit".into()));
    }
    if failures > 0 {
        warn!("{failures} replicates dropped after fitting failures");
    }
    let m = kept.len() as f64;
    let stats: Vec<(f64, f64, f64, f64)> = (0..partitions.len())
        .map(|i| {
            let est = kept.iter().map(|r| r[i].0);
            let mean = est.clone().sum::<f64>() / m;
            let var = est.clone().map(|b| (b - mean).powi(2)).sum::<f64>() / m;
            let mse = est.map(|b| (b - config.beta).powi(2)).sum::<f64>() / m;
            let mean_var = kept.iter().map(|r| r[i].1).sum::<f64>() / m;
            (mean, var, mse, mean_var)
        })
        .collect();
    let full = partitions.iter().position(|p| p.len() == config.k);
    let rows = partitions
        .iter()
        .zip(&config.ipd_fractions)
        .zip(&stats)
        .map(|((p, &f), &(mean, var, mse, mean_var))| {
            let (re, re_emp) = match full {
                Some(i) => (stats[i].3 / mean_var, stats[i].1 / var),
                None => (f64::NAN, f64::NAN),
            };
            GlmmRow {
                ipd_fraction: f,
                k1: p.len(),
                estimate: mean,
                bias: mean - config.beta,
                std_error: var.sqrt(),
                mse,
                mean_variance: mean_var,
                rel_eff: re,
                rel_eff_empirical: re_emp,
            }
        })
        .collect();
    Ok(GlmmReport {
        provenance: config.provenance(),
        rows,
        partitions,
        redraws,
        failures,
    })
}

/// Settings of the subsampled logistic workflow on a table of 2x2 trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsampleConfig {
    /// Participants sampled from each trial.
    pub n_sub: usize,
    pub k1: usize,
    pub pilots: usize,
    pub seed: u64,
    pub weight_mode: WeightMode,
}

impl Default for SubsampleConfig {
    fn default() -> Self {
        Self {
            n_sub: 50,
            k1: 5,
            pilots: 5,
            seed: 1,
            weight_mode: WeightMode::RareDisease,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorkflowRow {
    pub label: String,
    pub ipd: Vec<usize>,
    pub beta_hat: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsampleReport {
    pub sigma_alpha_sq: f64,
    /// Random-effect covariance fitted on the full IPD; every row uses it.
    pub sigma_hat: RandomEffectCov,
    pub pilots: Vec<usize>,
    /// IPD-MA, best IPD-AD-MA, worst IPD-AD-MA, AD-MA.
    pub rows: Vec<WorkflowRow>,
    pub redraws: u64,
}

impl SubsampleReport {
    fn row(&self, label: &str) -> &WorkflowRow {
        self.rows
            .iter()
            .find(|r| r.label == label)
            .expect("row present")
    }

    pub fn ipd_ma(&self) -> &WorkflowRow {
        self.row("ipd_ma")
    }

    pub fn best(&self) -> &WorkflowRow {
        self.row("best")
    }

    pub fn worst(&self) -> &WorkflowRow {
        self.row("worst")
    }

    pub fn ad_ma(&self) -> &WorkflowRow {
        self.row("ad_ma")
    }

    /// Share of the AD-to-IPD variance gap closed by the best subset.
    pub fn gap_recovered(&self) -> f64 {
        let (ad, best, ipd) = (
            self.ad_ma().variance,
            self.best().variance,
            self.ipd_ma().variance,
        );
        (ad - best) / (ad - ipd)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["estimator", "ipd_studies", "beta_hat", "se", "variance"])
            .map_err(csv_err)?;
        for r in &self.rows {
            let ids = r
                .ipd
                .iter()
                .map(|j| (j + 1).to_string())
                .collect::<Vec<_>>()
                .join(" ");
            w.write_record([
                r.label.clone(),
                ids,
                r.beta_hat.to_string(),
                r.variance.sqrt().to_string(),
                r.variance.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Expands a 2x2 table into binary IPD.
pub fn expand_two_by_two(
    id: &str,
    cases_t: u64,
    n_t: u64,
    cases_c: u64,
    n_c: u64,
) -> Result<IpdStudy> {
    if cases_t > n_t || cases_c > n_c {
        return Err(Error::study(id, "more cases than participants"));
    }
    let mut y = Vec::with_capacity((n_t + n_c) as usize);
    let mut x = Vec::with_capacity((n_t + n_c) as usize);
    for (cases, n, arm) in [(cases_t, n_t, true), (cases_c, n_c, false)] {
        for i in 0..n {
            y.push(if i < cases { 1.0 } else { 0.0 });
            x.push(arm);
        }
    }
    IpdStudy::new(id, y, x, OutcomeKind::Binary)
}

/// Subsamples every trial to `n_sub` participants, then compares IPD-MA,
/// AD-MA and the best and worst `k1` IPD subsets chosen from AD-only
/// selection weights. Subsamples that cannot be fitted are redrawn.
pub fn run_subsample_workflow(
    trials: &StudyCollection,
    config: &SubsampleConfig,
) -> Result<SubsampleReport> {
    let k = trials.len();
    if config.k1 < 2 || config.k1 >= k {
        return Err(Error::InvalidInput(format!(
            "k1 = {} must lie in 2..{k}",
            config.k1
        )));
    }
    if config.pilots < 2 || config.pilots > k {
        return Err(Error::InvalidInput(
            "between 2 and k pilot studies are required".into(),
        ));
    }
    let mut studies = Vec::with_capacity(k);
    let mut fits = Vec::with_capacity(k);
    let mut redraws = 0;
    for j in 0..k {
        let ad = trials.ad_or_summary(j)?;
        let (cases_t, cases_c) = ad
            .cases()
            .ok_or_else(|| Error::study(ad.id(), "2x2 counts required"))?;
        let full = expand_two_by_two(ad.id(), cases_t, ad.n_t(), cases_c, ad.n_c())?;
        let mut rng = rng::stream(config.seed, 0, j as u64, DrawKind::Subsample);
        let take = config.n_sub.min(full.n());
        let mut attempt = 0;
        loop {
            let mut idx = index::sample(&mut rng, full.n(), take).into_vec();
            idx.sort_unstable();
            let y = idx.iter().map(|&i| full.responses()[i]).collect();
            let x = idx.iter().map(|&i| full.treatment()[i]).collect();
            let fitted = IpdStudy::new(ad.id(), y, x, OutcomeKind::Binary)
                .and_then(|s| glmm::fit_study_logistic(&s).map(|f| (s, f)));
            match fitted {
                Ok((s, f)) => {
                    studies.push(s);
                    fits.push(f);
                    break;
                }
                Err(Error::Separation { .. } | Error::InvalidStudy { .. })
                    if attempt < MAX_REDRAWS =>
                {
                    attempt += 1;
                    redraws += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
    let ads = fits
        .iter()
        .zip(&studies)
        .map(|(f, s)| ad_from_fit(f, s))
        .collect::<Result<Vec<_>>>()?;

    let mut prng = rng::replicate_stream(config.seed, 0, DrawKind::Pilots);
    let mut pilots = index::sample(&mut prng, k, config.pilots).into_vec();
    pilots.sort_unstable();
    let pilot_studies: Vec<IpdStudy> = pilots.iter().map(|&j| studies[j].clone()).collect();
    let sigma_alpha_sq = glmm::estimate_sigma_alpha_logistic(&pilot_studies)?.sigma_alpha_sq;

    let (u, v) = glmm::selection_weights_logistic(&ads, sigma_alpha_sq, config.weight_mode)?;
    let inst = SelectionInstance::new(u, v, config.k1)?;
    let best = select::ssa_select(&inst)?.chosen;
    let worst = select::brute_force_worst(&inst)?.chosen;

    let full = glmm::combine_fits(
        &fits,
        &[],
        &GlmmOptions {
            independent: true,
            ..Default::default()
        },
        Partition::all_ipd(k),
    )?;
    // every row is evaluated at the covariance fitted on the full IPD
    let options = GlmmOptions {
        independent: true,
        fixed_sigma: Some(full.sigma_hat),
        ..Default::default()
    };
    let estimate = |label: &str, ipd: Vec<usize>| -> Result<WorkflowRow> {
        let part = Partition::new(k, &ipd)?;
        let f: Vec<GlmmStudyFit> = part.ipd().iter().map(|&j| fits[j].clone()).collect();
        let a: Vec<AdStudy> = part.ad().iter().map(|&j| ads[j].clone()).collect();
        let c = glmm::combine_fits(&f, &a, &options, part)?;
        Ok(WorkflowRow {
            label: label.to_string(),
            ipd,
            beta_hat: c.beta_hat,
            variance: c.variance_beta,
        })
    };
    let rows = vec![
        estimate("ipd_ma", (0..k).collect())?,
        estimate("best", best)?,
        estimate("worst", worst)?,
        estimate("ad_ma", Vec::new())?,
    ];
    Ok(SubsampleReport {
        sigma_alpha_sq,
        sigma_hat: full.sigma_hat,
        pilots,
        rows,
        redraws,
    })
}

/// Writes `k1,max_re,argmax,min_re,argmin` rows with one-based study ids.
pub fn write_re_curve_csv<W: Write>(rows: &[select::ReCurveRow], writer: W) -> Result<()> {
    let ids = |s: &[usize]| {
        s.iter()
            .map(|j| (j + 1).to_string())
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["k1", "max_re", "argmax", "min_re", "argmin"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.k1.to_string(),
            r.max_re.to_string(),
            ids(&r.argmax),
            r.min_re.map(|x| x.to_string()).unwrap_or_default(),
            r.argmin.as_deref().map(ids).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `k1,combination_id,re` rows for every subset of every listed size.
pub fn write_re_landscape_csv<W: Write>(
    n: &[usize],
    pi: &[f64],
    vc: &VarianceComponents,
    k1_range: &[usize],
    cap: u64,
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["k1", "combination_id", "ipd_studies", "re"])
        .map_err(csv_err)?;
    for &k1 in k1_range {
        for (id, set, re) in select::all_combinations_re(n, pi, vc, k1, cap)? {
            let ids = set
                .iter()
                .map(|j| (j + 1).to_string())
                .collect::<Vec<_>>()
                .join(" ");
            w.write_record([k1.to_string(), id.to_string(), ids, re.to_string()])
                .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}


#[cfg(test)]
mod properties {
    use super::*;

    #[test]
    fn mse_identity_per_cell() {
        let cfg = ScenarioConfig {
            replicates: 20,
            seed: 11,
            ..ScenarioConfig::logistic(12, 80)
        };
        let report = run_glmm_experiment(&cfg).unwrap();
        for row in &report.rows {
            let identity = row.bias.powi(2) + row.std_error.powi(2);
            assert!(
                (row.mse - identity).abs() <= 1e-12 * row.mse.max(1e-12),
                "{row:?}"
            );
        }
    }

    #[test]
    fn replicate_streams_do_not_overlap() {
        let cfg = ScenarioConfig {
            replicates: 6,
            seed: 3,
            ..ScenarioConfig::mixture_match(10)
        };
        let draws: Vec<_> = (0..6).map(|r| draw_design(&cfg, r)).collect();
        for i in 0..draws.len() {
            for j in i + 1..draws.len() {
                assert_ne!(draws[i].0, draws[j].0);
            }
        }
        // replicate r does not depend on how many replicates the run has
        let longer = ScenarioConfig {
            replicates: 50,
            ..cfg.clone()
        };
        assert_eq!(draw_design(&longer, 4), draws[4]);
    }
}
