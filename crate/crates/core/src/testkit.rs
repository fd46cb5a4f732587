//! Shared proptest strategies.

use proptest::prelude::*;

use crate::lmm::VarianceComponents;

/// `(n_j, pi_j)` with `pi_j` a realizable arm share.
pub fn design(max_k: usize) -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
    prop::collection::vec((2usize..=30).prop_flat_map(|n| (Just(n), 1..n)), 2..=max_k).prop_map(
        |d| {
            let n = d.iter().map(|&(n, _)| n).collect();
            let pi = d.iter().map(|&(n, t)| t as f64 / n as f64).collect();
            (n, pi)
        },
    )
}

pub fn lmm_case(
    max_k: usize,
) -> impl Strategy<Value = (Vec<usize>, Vec<f64>, VarianceComponents, Vec<bool>)> {
    design(max_k).prop_flat_map(|(n, pi)| {
        let k = n.len();
        (
            Just(n),
            Just(pi),
            (0.0..2.0f64, prop::collection::vec(0.1..6.0f64, k))
                .prop_map(|(sa, s2)| VarianceComponents::per_study(sa, s2).unwrap()),
            prop::collection::vec(any::<bool>(), k),
        )
    })
}

pub fn selection_case() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, usize)> {
    (3usize..=9).prop_flat_map(|k| {
        (
            prop::collection::vec(0.01..0.99f64, k),
            prop::collection::vec(0.1..10.0f64, k),
            2..=k,
        )
    })
}

pub fn members(flags: &[bool]) -> Vec<usize> {
    flags
        .iter()
        .enumerate()
        .filter(|(_, &f)| f)
        .map(|(j, _)| j)
        .collect()
}
