use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ini::Ini;
use ipdmix::{OutcomeKind, SelectionMethod, WeightMode};

#[derive(Debug, Parser)]
#[command(
    name = "ipdmix",
    version,
    about = "Combine IPD and aggregate-data studies and choose which studies to obtain as IPD",
    args_override_self = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pooled treatment effect as IPD-MA, IPD-AD-MA and AD-MA.
    Estimate(EstimateArgs),
    /// Choose k1 studies to analyse as IPD.
    Select(SelectArgs),
    /// Best and worst relative efficiency for each number of IPD studies.
    ReCurve(ReCurveArgs),
    /// Run a simulation scenario.
    Simulate(SimulateArgs),
    /// Reduce IPD to aggregate-data rows.
    Summarize(SummarizeArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Estimate(_) => "estimate",
            Command::Select(_) => "select",
            Command::ReCurve(_) => "re-curve",
            Command::Simulate(_) => "simulate",
            Command::Summarize(_) => "summarize",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::Estimate(a) => &a.common,
            Command::Select(a) => &a.common,
            Command::ReCurve(a) => &a.common,
            Command::Simulate(a) => &a.common,
            Command::Summarize(a) => &a.common,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Model {
    Lmm,
    Logistic,
}

impl Model {
    pub fn outcome(self) -> OutcomeKind {
        match self {
            Model::Lmm => OutcomeKind::Continuous,
            Model::Logistic => OutcomeKind::Binary,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Exact,
    Ssa,
    Extremes,
}

impl From<Method> for SelectionMethod {
    fn from(m: Method) -> Self {
        match m {
            Method::Exact => SelectionMethod::Exact,
            Method::Ssa => SelectionMethod::Ssa,
            Method::Extremes => SelectionMethod::Extremes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Weights {
    RareDisease,
    TwoByTwo,
}

impl From<Weights> for WeightMode {
    fn from(w: Weights) -> Self {
        match w {
            Weights::RareDisease => WeightMode::RareDisease,
            Weights::TwoByTwo => WeightMode::TwoByTwo,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// INI file of `flag = value` lines; command-line flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = "IPDMIX_OUT", default_value = "ipdmix-out")]
    pub out: PathBuf,
    /// Worker threads for simulation replicates (default: all cores).
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct Inputs {
    /// IPD file with columns `study_id,y,x`.
    #[arg(long)]
    pub ipd: Option<PathBuf>,
    /// AD file with columns `study_id,beta_hat,var_hat,n_t,n_c[,cases_t,cases_c]`.
    #[arg(long)]
    pub ad: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "lmm")]
    pub model: Model,
    /// Treat AD rows that carry 2x2 counts as binary IPD (logistic model).
    #[arg(long)]
    pub expand_tables: bool,
}

#[derive(Debug, Clone, Args)]
pub struct Components {
    /// Intercept variance; overrides pilot estimation.
    #[arg(long)]
    pub sigma_alpha: Option<f64>,
    /// Use one pooled error variance for every study (linear model).
    #[arg(long)]
    pub pooled_sigma: bool,
    /// Pilot IPD studies for estimating the intercept variance.
    #[arg(long, value_delimiter = ',')]
    pub pilot: Vec<String>,
    /// Draw this many pilot studies at random among those with IPD.
    #[arg(long)]
    pub pilot_count: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Selection weights for the logistic model.
    #[arg(long, value_enum, default_value = "rare-disease")]
    pub weights: Weights,
}

#[derive(Debug, Clone, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[command(flatten)]
    pub components: Components,
    /// Select this many IPD studies instead of using every study with IPD.
    #[arg(long)]
    pub k1: Option<usize>,
    #[arg(long, value_enum, default_value = "ssa")]
    pub method: Method,
    /// Explicit IPD set by study id.
    #[arg(long, value_delimiter = ',', conflicts_with = "k1")]
    pub ipd_studies: Vec<String>,
    /// Fit independent random effects (logistic model).
    #[arg(long)]
    pub independent: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[command(flatten)]
    pub components: Components,
    #[arg(long)]
    pub k1: usize,
    #[arg(long, value_enum, default_value = "exact")]
    pub method: Method,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
pub struct ReCurveArgs {
    #[command(flatten)]
    pub inputs: Inputs,
    #[command(flatten)]
    pub components: Components,
    #[arg(long, value_enum, default_value = "exact")]
    pub method: Method,
    /// Numbers of IPD studies, as `a..b` or a comma list (default: 1..k).
    #[arg(long)]
    pub k1_range: Option<String>,
    /// Also write the relative efficiency of every subset.
    #[arg(long)]
    pub landscape: bool,
    /// Largest number of subsets the exact search may face.
    #[arg(long, default_value_t = ipdmix::select::DEFAULT_ENUMERATION_CAP)]
    pub cap: u64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Preset name, e.g. `uniform_pi`, `mixture_match`, `sensitivity_heterogeneous`,
    /// `logistic_k50_n100` or `beta_blocker`.
    #[arg(long)]
    pub scenario: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub reps: Option<u64>,
    /// Trial file for the `beta_blocker` workflow.
    #[arg(long)]
    pub ad: Option<PathBuf>,
    /// Number of IPD studies (selection scenarios and the trial workflow).
    #[arg(long)]
    pub k1: Option<usize>,
    #[arg(long, value_enum, default_value = "rare-disease")]
    pub weights: Weights,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
pub struct SummarizeArgs {
    #[arg(long)]
    pub ipd: PathBuf,
    #[arg(long, value_enum, default_value = "lmm")]
    pub model: Model,
    #[command(flatten)]
    pub common: Common,
}

/// Splices the `--config` file's entries in right after the subcommand so
/// that flags given on the command line win.
pub fn merge_config(raw: Vec<OsString>) -> anyhow::Result<Vec<OsString>> {
    let mut path = None;
    for (i, arg) in raw.iter().enumerate() {
        let s = arg.to_string_lossy();
        if s == "--config" {
            path = raw.get(i + 1).map(PathBuf::from);
        } else if let Some(p) = s.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        }
    }
    let Some(path) = path else {
        return Ok(raw);
    };
    if raw.len() < 2 {
        return Ok(raw);
    }
    let ini = Ini::load_from_file(&path)
        .with_context(|| format!("reading config file {}", path.display()))?;
    let mut injected = Vec::new();
    for (section, props) in ini.iter() {
        if let Some(s) = section {
            // only the general section and the one named after the subcommand apply
            if raw[1].to_string_lossy() != s {
                continue;
            }
        }
        for (key, value) in props.iter() {
            let key = key.trim().replace('_', "-");
            if key == "config" {
                bail!("config files cannot include other config files");
            }
            match value.trim() {
                "true" => injected.push(OsString::from(format!("--{key}"))),
                "false" => {}
                v => {
                    injected.push(OsString::from(format!("--{key}")));
                    injected.push(OsString::from(v));
                }
            }
        }
    }
    let mut merged = raw[..2].to_vec();
    merged.extend(injected);
    merged.extend_from_slice(&raw[2..]);
    Ok(merged)
}

/// Parses `a..b`, `a..=b` or `a,b,c`.
pub fn parse_k1_range(text: &str, k: usize) -> anyhow::Result<Vec<usize>> {
    let text = text.trim();
    let values: Vec<usize> = if let Some((a, b)) = text.split_once("..") {
        let a: usize = a.trim().parse().context("k1 range start")?;
        let b: usize = b
            .trim()
            .trim_start_matches('=')
            .parse()
            .context("k1 range end")?;
        (a..=b).collect()
    } else {
        text.split(',')
            .map(|s| s.trim().parse().context("k1 list entry"))
            .collect::<anyhow::Result<_>>()?
    };
    if values.is_empty() || values.iter().any(|&v| v == 0 || v > k) {
        bail!("every k1 must lie in 1..={k}");
    }
    Ok(values)
}
