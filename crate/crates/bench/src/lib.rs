//! Fixtures shared by the benchmarks.

use ipdmix::lmm::VarianceComponents;
use ipdmix::select::selection_weights_lmm;
use ipdmix::sim::{draw_design, ScenarioConfig};
use ipdmix::SelectionInstance;

/// Linear-model selection instance with `k` studies drawn from the
/// mixture design.
pub fn mixture_instance(k: usize, k1: usize, replicate: u64) -> SelectionInstance {
    let config = ScenarioConfig::mixture_match(k);
    let (pi, sigma_sq) = draw_design(&config, replicate);
    let n = vec![config.n_j(0); k];
    let vc =
        VarianceComponents::per_study(config.sigma_alpha_sq, sigma_sq).expect("valid components");
    let (u, v) = selection_weights_lmm(&n, &pi, &vc).expect("valid design");
    SelectionInstance::new(u, v, k1).expect("valid instance")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instance_has_requested_shape() {
        let inst = mixture_instance(12, 4, 0);
        assert_eq!(inst.k(), 12);
        assert_eq!(inst.k1(), 4);
    }
}
