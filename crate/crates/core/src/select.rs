//! Choosing which studies to analyse as IPD.
//!
//! Every solver maximizes (or, for the worst case, minimizes)
//!
//! `F(A) = sum_{j in A} v_j (u_j - u_A)^2`, `u_A = sum_A v_j u_j / sum_A v_j`
//!
//! over subsets `A` of size `k1`. In the linear mixed model `u_j = pi_j` and
//! `v_j = n_j / (s_j^2 a_j)`; for the logistic model see
//! [`crate::glmm::selection_weights_logistic`].
//!
//! Ties are resolved by the total order on `(objective, index set)` with sets
//! compared lexicographically: the best subset is the maximum of that order,
//! the worst subset its minimum. When every subset scores zero (one study per
//! set, or all `u_j` equal) the result is flagged `indifferent` and the lowest
//! `k1` indices are returned.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lmm::{self, VarianceComponents};

/// Default limit on the number of candidate subsets the exact solvers accept.
pub const DEFAULT_ENUMERATION_CAP: u64 = 10_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionInstance {
    u: Vec<f64>,
    v: Vec<f64>,
    k1: usize,
}

impl SelectionInstance {
    pub fn new(u: Vec<f64>, v: Vec<f64>, k1: usize) -> Result<Self> {
        if u.len() != v.len() {
            return Err(Error::InvalidInput("u and v differ in length".into()));
        }
        if u.is_empty() {
            return Err(Error::InvalidInput("empty selection instance".into()));
        }
        if k1 == 0 || k1 > u.len() {
            return Err(Error::InvalidInput(format!(
                "k1 = {k1} outside 1..={}",
                u.len()
            )));
        }
        if u.iter().chain(&v).any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(Error::InvalidInput(
                "u and v must be finite and positive".into(),
            ));
        }
        Ok(Self { u, v, k1 })
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn k(&self) -> usize {
        self.u.len()
    }

    pub fn k1(&self) -> usize {
        self.k1
    }

    pub fn with_k1(&self, k1: usize) -> Result<Self> {
        Self::new(self.u.clone(), self.v.clone(), k1)
    }

    fn degenerate(&self) -> bool {
        self.k1 == 1 || self.u.iter().all(|&x| x == self.u[0])
    }

    fn indifferent(&self, method: SelectionMethod) -> SelectionResult {
        SelectionResult {
            chosen: (0..self.k1).collect(),
            objective: 0.0,
            method,
            indifferent: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    Exact,
    Ssa,
    Extremes,
}

impl fmt::Display for SelectionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionMethod::Exact => "exact",
            SelectionMethod::Ssa => "ssa",
            SelectionMethod::Extremes => "extremes",
        })
    }
}

impl std::str::FromStr for SelectionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "ssa" => Ok(Self::Ssa),
            "extremes" => Ok(Self::Extremes),
            other => Err(Error::InvalidInput(format!(
                "unknown selection method `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    /// Zero-based study indices, ascending.
    pub chosen: Vec<usize>,
    pub objective: f64,
    pub method: SelectionMethod,
    /// Every subset of this size scores the same; `chosen` is conventional.
    pub indifferent: bool,
}

fn objective_unchecked(u: &[f64], v: &[f64], subset: &[usize]) -> f64 {
    let weight: f64 = subset.iter().map(|&j| v[j]).sum();
    let mean = subset.iter().map(|&j| v[j] * u[j]).sum::<f64>() / weight;
    subset.iter().map(|&j| v[j] * (u[j] - mean).powi(2)).sum()
}

/// `sum_{j in A} v_j (u_j - u_A)^2` with `u_A` the `v`-weighted mean of `u`
/// over `A`.
pub fn objective(u: &[f64], v: &[f64], subset: &[usize]) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::InvalidInput("objective of an empty subset".into()));
    }
    if u.len() != v.len() {
        return Err(Error::InvalidInput("u and v differ in length".into()));
    }
    if let Some(&j) = subset.iter().find(|&&j| j >= u.len()) {
        return Err(Error::InvalidInput(format!("index {j} out of range")));
    }
    Ok(objective_unchecked(u, v, subset))
}

/// `(a_obj, a_set)` compared with `(b_obj, b_set)` in the selection order.
fn order(a_obj: f64, a_set: &[usize], b_obj: f64, b_set: &[usize]) -> Ordering {
    a_obj.total_cmp(&b_obj).then_with(|| a_set.cmp(b_set))
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Goal {
    Max,
    Min,
}

struct Search<'a> {
    u: &'a [f64],
    v: &'a [f64],
    k1: usize,
    goal: Goal,
    best_obj: f64,
    best_set: Vec<usize>,
    scratch: Vec<f64>,
}

impl Search<'_> {
    fn offer(&mut self, set: &[usize]) {
        let obj = objective_unchecked(self.u, self.v, set);
        let better = match self.goal {
            Goal::Max => order(obj, set, self.best_obj, &self.best_set) == Ordering::Greater,
            Goal::Min => order(obj, set, self.best_obj, &self.best_set) == Ordering::Less,
        };
        if self.best_set.is_empty() || better {
            self.best_obj = obj;
            self.best_set = set.to_vec();
        }
    }

    /// Upper bound on `F` over completions of `partial` by `need` indices from
    /// `start..k`. For any `m`, `F(A) <= sum_A v (u - m)^2`, and the right-hand
    /// side is maximized separably by the `need` largest terms; the bound is
    /// convex in `m` and minimized by golden section.
    fn upper_bound(&mut self, partial: &[usize], start: usize, need: usize) -> f64 {
        let (u, v) = (self.u, self.v);
        let pool = start..u.len();
        let candidates = || partial.iter().copied().chain(pool.clone()).map(|j| u[j]);
        let lo = candidates().fold(f64::INFINITY, f64::min);
        let hi = candidates().fold(f64::NEG_INFINITY, f64::max);
        let scratch = &mut self.scratch;
        let mut eval = |m: f64| {
            let fixed: f64 = partial.iter().map(|&j| v[j] * (u[j] - m).powi(2)).sum();
            scratch.clear();
            scratch.extend(pool.clone().map(|j| v[j] * (u[j] - m).powi(2)));
            let len = scratch.len();
            if need < len {
                scratch.select_nth_unstable_by(len - need, |a, b| a.total_cmp(b));
            }
            fixed + scratch[len - need..].iter().sum::<f64>()
        };
        let (_, bound) = crate::optim::golden_section(&mut eval, lo, hi, 40);
        bound
    }

    fn descend(&mut self, partial: &mut Vec<usize>, start: usize) {
        let need = self.k1 - partial.len();
        if need == 0 {
            self.offer(partial);
            return;
        }
        if !self.best_set.is_empty() {
            let slack = 1e-9 * self.best_obj.abs() + 1e-300;
            let prune = match self.goal {
                Goal::Max => self.upper_bound(partial, start, need) < self.best_obj - slack,
                // inserting studies never lowers F, so F(partial) bounds every completion
                Goal::Min => {
                    partial.len() >= 2
                        && objective_unchecked(self.u, self.v, partial) > self.best_obj + slack
                }
            };
            if prune {
                return;
            }
        }
        for j in start..=self.u.len() - need {
            partial.push(j);
            self.descend(partial, j + 1);
            partial.pop();
        }
    }
}

fn exact(instance: &SelectionInstance, goal: Goal, cap: u64) -> Result<SelectionResult> {
    if binomial(instance.k() as u64, instance.k1 as u64) > cap {
        return Err(Error::EnumerationCap { cap });
    }
    if instance.degenerate() {
        return Ok(instance.indifferent(SelectionMethod::Exact));
    }
    let mut search = Search {
        u: &instance.u,
        v: &instance.v,
        k1: instance.k1,
        goal,
        best_obj: 0.0,
        best_set: Vec::new(),
        scratch: Vec::with_capacity(instance.k()),
    };
    if goal == Goal::Max && instance.k1 >= 2 {
        let seed = ssa_select(instance)?;
        search.offer(&seed.chosen);
    }
    search.descend(&mut Vec::with_capacity(instance.k1), 0);
    Ok(SelectionResult {
        chosen: search.best_set,
        objective: search.best_obj,
        method: SelectionMethod::Exact,
        indifferent: false,
    })
}

/// Globally optimal subset by branch and bound, with the default cap.
pub fn brute_force_select(instance: &SelectionInstance) -> Result<SelectionResult> {
    brute_force_select_capped(instance, DEFAULT_ENUMERATION_CAP)
}

pub fn brute_force_select_capped(
    instance: &SelectionInstance,
    cap: u64,
) -> Result<SelectionResult> {
    exact(instance, Goal::Max, cap)
}

/// Subset with the smallest objective (the least efficient IPD choice).
pub fn brute_force_worst(instance: &SelectionInstance) -> Result<SelectionResult> {
    brute_force_worst_capped(instance, DEFAULT_ENUMERATION_CAP)
}

pub fn brute_force_worst_capped(instance: &SelectionInstance, cap: u64) -> Result<SelectionResult> {
    exact(instance, Goal::Min, cap)
}

/// State of the sequential selector after each step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsaStep {
    pub added: usize,
    /// Running weighted mean `M`.
    pub mean: f64,
    /// Running weight sum `D`.
    pub weight: f64,
}

/// Sequential selection: seed with the best pair, then repeatedly add the
/// study with the largest gain `v_r (u_r - M)^2 / (D + v_r)`.
pub fn ssa_select(instance: &SelectionInstance) -> Result<SelectionResult> {
    ssa_select_traced(instance).map(|(r, _)| r)
}

pub fn ssa_select_traced(instance: &SelectionInstance) -> Result<(SelectionResult, Vec<SsaStep>)> {
    let k1 = instance.k1;
    if k1 < 2 {
        return Err(Error::InvalidInput(
            "the sequential selector requires k1 >= 2".into(),
        ));
    }
    if instance.degenerate() {
        return Ok((instance.indifferent(SelectionMethod::Ssa), Vec::new()));
    }
    let (u, v) = (&instance.u, &instance.v);
    let k = instance.k();

    let mut seed = (0, 1);
    let mut seed_score = f64::NEG_INFINITY;
    for p in 0..k {
        for q in p + 1..k {
            let score = (u[p] - u[q]).powi(2) / (1.0 / v[p] + 1.0 / v[q]);
            if score >= seed_score {
                seed_score = score;
                seed = (p, q);
            }
        }
    }
    let (m, n) = seed;
    let mut chosen = vec![m, n];
    let mut in_set = vec![false; k];
    in_set[m] = true;
    in_set[n] = true;
    let mut weight = v[m] + v[n];
    let mut mean = (v[m] * u[m] + v[n] * u[n]) / weight;
    let mut trace = vec![
        SsaStep {
            added: m,
            mean: u[m],
            weight: v[m],
        },
        SsaStep {
            added: n,
            mean,
            weight,
        },
    ];

    while chosen.len() < k1 {
        let mut pick = usize::MAX;
        let mut pick_gain = f64::NEG_INFINITY;
        for r in (0..k).filter(|&r| !in_set[r]) {
            let gain = v[r] * (u[r] - mean).powi(2) / (weight + v[r]);
            if gain >= pick_gain {
                pick_gain = gain;
                pick = r;
            }
        }
        in_set[pick] = true;
        chosen.push(pick);
        mean = (weight * mean + v[pick] * u[pick]) / (weight + v[pick]);
        weight += v[pick];
        trace.push(SsaStep {
            added: pick,
            mean,
            weight,
        });
    }
    chosen.sort_unstable();
    let objective = objective_unchecked(u, v, &chosen);
    Ok((
        SelectionResult {
            chosen,
            objective,
            method: SelectionMethod::Ssa,
            indifferent: false,
        },
        trace,
    ))
}

/// Balanced homoscedastic rule: sort the studies by `pi`, then take studies
/// alternately from the two ends. Both starting ends are tried and the better
/// subset kept. The objective is reported with unit weights.
pub fn extremes_select(pi: &[f64], k1: usize) -> Result<SelectionResult> {
    let ones = vec![1.0; pi.len()];
    let instance = SelectionInstance::new(pi.to_vec(), ones, k1)?;
    if instance.degenerate() {
        return Ok(instance.indifferent(SelectionMethod::Extremes));
    }
    let mut sorted: Vec<usize> = (0..pi.len()).collect();
    sorted.sort_by(|&a, &b| pi[a].total_cmp(&pi[b]).then(a.cmp(&b)));

    let alternate = |low_first: bool| {
        let (mut lo, mut hi) = (0usize, sorted.len());
        let mut take_low = low_first;
        let mut set = Vec::with_capacity(k1);
        while set.len() < k1 {
            if take_low {
                set.push(sorted[lo]);
                lo += 1;
            } else {
                hi -= 1;
                set.push(sorted[hi]);
            }
            take_low = !take_low;
        }
        set.sort_unstable();
        let obj = objective_unchecked(&instance.u, &instance.v, &set);
        (obj, set)
    };
    let (obj_a, set_a) = alternate(true);
    let (obj_b, set_b) = alternate(false);
    let (objective, chosen) = if order(obj_a, &set_a, obj_b, &set_b) == Ordering::Less {
        (obj_b, set_b)
    } else {
        (obj_a, set_a)
    };
    Ok(SelectionResult {
        chosen,
        objective,
        method: SelectionMethod::Extremes,
        indifferent: false,
    })
}

/// Selection weights of the linear mixed model: `u_j = pi_j`,
/// `v_j = n_j / (s_j^2 a_j)`.
pub fn selection_weights_lmm(
    n: &[usize],
    pi: &[f64],
    vc: &VarianceComponents,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if n.len() != pi.len() {
        return Err(Error::InvalidInput(
            "sample sizes and proportions differ in length".into(),
        ));
    }
    vc.check(n.len())?;
    let v = n
        .iter()
        .enumerate()
        .map(|(j, &nj)| nj as f64 / (vc.sigma_sq(j) * vc.a(j, nj)))
        .collect();
    Ok((pi.to_vec(), v))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReCurveRow {
    pub k1: usize,
    pub max_re: f64,
    pub argmax: Vec<usize>,
    /// Only filled in exact mode.
    pub min_re: Option<f64>,
    pub argmin: Option<Vec<usize>>,
}

/// Best (and in exact mode worst) relative efficiency for each `k1`.
pub fn re_curve(
    n: &[usize],
    pi: &[f64],
    vc: &VarianceComponents,
    k1_range: &[usize],
    mode: SelectionMethod,
    cap: u64,
) -> Result<Vec<ReCurveRow>> {
    let (u, v) = selection_weights_lmm(n, pi, vc)?;
    let best = lmm::variance_ipd_ma(n, pi, vc)?;
    let re = |set: &[usize]| -> Result<f64> { Ok(best / lmm::variance_combined(n, pi, vc, set)?) };
    k1_range
        .iter()
        .map(|&k1| {
            let instance = SelectionInstance::new(u.clone(), v.clone(), k1)?;
            match mode {
                SelectionMethod::Exact => {
                    let hi = brute_force_select_capped(&instance, cap)?;
                    let lo = brute_force_worst_capped(&instance, cap)?;
                    Ok(ReCurveRow {
                        k1,
                        max_re: re(&hi.chosen)?,
                        argmax: hi.chosen,
                        min_re: Some(re(&lo.chosen)?),
                        argmin: Some(lo.chosen),
                    })
                }
                SelectionMethod::Ssa | SelectionMethod::Extremes => {
                    let hi = if k1 == 1 {
                        instance.indifferent(mode)
                    } else if mode == SelectionMethod::Ssa {
                        ssa_select(&instance)?
                    } else {
                        extremes_select(pi, k1)?
                    };
                    Ok(ReCurveRow {
                        k1,
                        max_re: re(&hi.chosen)?,
                        argmax: hi.chosen,
                        min_re: None,
                        argmin: None,
                    })
                }
            }
        })
        .collect()
}

/// Relative efficiency of every subset of size `k1`, in lexicographic order.
/// Returns `(combination id, subset, RE)` triples.
pub fn all_combinations_re(
    n: &[usize],
    pi: &[f64],
    vc: &VarianceComponents,
    k1: usize,
    cap: u64,
) -> Result<Vec<(u64, Vec<usize>, f64)>> {
    let k = n.len();
    if k1 == 0 || k1 > k {
        return Err(Error::InvalidInput(format!("k1 = {k1} outside 1..={k}")));
    }
    if binomial(k as u64, k1 as u64) > cap {
        return Err(Error::EnumerationCap { cap });
    }
    let best = lmm::variance_ipd_ma(n, pi, vc)?;
    let mut out = Vec::new();
    let mut set: Vec<usize> = (0..k1).collect();
    let mut id = 0u64;
    loop {
        out.push((
            id,
            set.clone(),
            best / lmm::variance_combined(n, pi, vc, &set)?,
        ));
        id += 1;
        if !next_combination(&mut set, k) {
            break;
        }
    }
    Ok(out)
}

/// Advances `set` to the next `|set|`-subset of `0..k` in lexicographic order.
pub fn next_combination(set: &mut [usize], k: usize) -> bool {
    let r = set.len();
    let mut i = r;
    while i > 0 {
        i -= 1;
        if set[i] < k - r + i {
            set[i] += 1;
            for t in i + 1..r {
                set[t] = set[t - 1] + 1;
            }
            return true;
        }
    }
    false
}

pub fn binomial(n: u64, r: u64) -> u64 {
    if r > n {
        return 0;
    }
    let r = r.min(n - r);
    let mut acc: u128 = 1;
    for i in 0..r {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return u64::MAX;
        }
    }
    acc as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    const UNIFORM_PI: [f64; 10] = [0.1, 0.2, 0.3, 0.3, 0.3, 0.5, 0.6, 0.6, 0.8, 0.8];

    fn uniform_design(k1: usize) -> SelectionInstance {
        let vc = VarianceComponents::pooled(0.025, 2.5).unwrap();
        let (u, v) = selection_weights_lmm(&[10; 10], &UNIFORM_PI, &vc).unwrap();
        SelectionInstance::new(u, v, k1).unwrap()
    }

    #[test]
    fn objective_basics() {
        assert_eq!(objective(&[0.3, 0.7], &[1.0, 2.0], &[1]).unwrap(), 0.0);
        assert!((objective(&[1e-9, 1.0], &[1.0, 1.0], &[0, 1]).unwrap() - 0.5).abs() < 1e-8);
        assert!(objective(&[0.1], &[1.0], &[]).is_err());
    }

    #[test]
    fn uniform_design_best_and_worst_pairs() {
        assert_eq!(
            brute_force_select(&uniform_design(2)).unwrap().chosen,
            vec![0, 9]
        );
        assert_eq!(
            brute_force_worst(&uniform_design(2)).unwrap().chosen,
            vec![2, 3]
        );
        assert_eq!(ssa_select(&uniform_design(2)).unwrap().chosen, vec![0, 9]);
        assert_eq!(
            extremes_select(&UNIFORM_PI, 4).unwrap().chosen,
            vec![0, 1, 8, 9]
        );
    }

    #[test]
    fn full_set_is_only_candidate() {
        let all: Vec<usize> = (0..10).collect();
        assert_eq!(brute_force_select(&uniform_design(10)).unwrap().chosen, all);
        assert_eq!(brute_force_worst(&uniform_design(10)).unwrap().chosen, all);
        assert_eq!(ssa_select(&uniform_design(10)).unwrap().chosen, all);
        assert_eq!(extremes_select(&UNIFORM_PI, 10).unwrap().chosen, all);
    }

    #[test]
    fn singletons_are_indifferent() {
        let r = brute_force_select(&uniform_design(1)).unwrap();
        assert!(r.indifferent);
        assert_eq!(r.chosen, vec![0]);
        assert_eq!(r.objective, 0.0);
        assert!(ssa_select(&uniform_design(1)).is_err());
    }

    #[test]
    fn equal_u_yields_lowest_indices() {
        let inst =
            SelectionInstance::new(vec![0.4; 6], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 3).unwrap();
        for r in [
            ssa_select(&inst).unwrap(),
            brute_force_select(&inst).unwrap(),
        ] {
            assert!(r.indifferent);
            assert_eq!(r.chosen, vec![0, 1, 2]);
            assert_eq!(r.objective, 0.0);
        }
    }

    #[test]
    fn enumeration_cap() {
        let err = brute_force_select_capped(&uniform_design(5), 3).unwrap_err();
        assert!(matches!(err, Error::EnumerationCap { cap: 3 }));
    }

    #[test]
    fn combinations() {
        assert_eq!(binomial(10, 2), 45);
        assert_eq!(binomial(10, 4), 210);
        assert_eq!(binomial(30, 10), 30_045_015);
        let mut s = vec![0, 1];
        let mut count = 1;
        while next_combination(&mut s, 5) {
            count += 1;
        }
        assert_eq!(count, 10);
        assert_eq!(s, vec![3, 4]);
    }

    #[test]
    fn method_parse() {
        assert_eq!(
            "ssa".parse::<SelectionMethod>().unwrap(),
            SelectionMethod::Ssa
        );
        assert!("greedy".parse::<SelectionMethod>().is_err());
    }
}
