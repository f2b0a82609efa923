//! Shared inputs for the criterion benches in `benches/`.

use gtsynth::catalog;
use gtsynth::codebook::VirtualCodebooks;
use gtsynth::{all_rate_bounds, assign_layers, GaussianTree, RateTuple, SignDistribution, SynthesisPlan};

/// Named trees of increasing size.
pub fn trees() -> Vec<(&'static str, GaussianTree)> {
    vec![("star", catalog::star(0.6)), ("fig2b", catalog::fig2b()), ("fig7", catalog::fig7())]
}

/// Virtual codebooks for an already-layered tree at `mult` times its bounds.
pub fn codebooks(tree: &GaussianTree, block_len: usize, mult: f64) -> VirtualCodebooks {
    let (t, l, _) = gtsynth::normalize_for_synthesis(tree, &assign_layers(tree)).expect("catalog tree normalizes");
    let plan = SynthesisPlan::new(&t, &l).expect("catalog tree plans");
    let pi = SignDistribution::uniform(&t, 0.5).expect("valid pi");
    let bounds = all_rate_bounds(&t, &l, &pi, 5_000, 1).expect("bounds");
    let rates = RateTuple::from_bounds(&bounds, mult).expect("rates");
    VirtualCodebooks::new(plan, block_len, rates, pi, 1).expect("codebooks")
}
