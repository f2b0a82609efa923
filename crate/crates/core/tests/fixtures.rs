//! The JSON trees under `trees/` against the in-code catalog, and the
//! end-to-end pipeline on each of them.

use std::path::PathBuf;

use gtsynth::catalog::{self, random_general_tree, RandomTreeOptions};
use gtsynth::codebook::VirtualCodebooks;
use gtsynth::rng::substream;
use gtsynth::transforms::TransformKind;
use gtsynth::{
    all_rate_bounds, assign_layers, normalize_for_synthesis, parse_tree, synthesize_one, verify_provenance,
    GaussianTree, RateTuple, SignDistribution, SynthesisPlan,
};

fn fixture(name: &str) -> GaussianTree {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../trees").join(format!("{name}.json"));
    parse_tree(&std::fs::read_to_string(path).unwrap()).unwrap().0
}

#[test]
fn fixtures_match_catalog() {
    assert_eq!(fixture("star"), catalog::star(0.6));
    assert_eq!(fixture("fig1"), catalog::fig1());
    assert_eq!(fixture("fig2a"), catalog::fig2a(0.8, 0.6));
    assert_eq!(fixture("fig2b"), catalog::fig2b());
    assert_eq!(fixture("fig7"), catalog::fig7());
    assert_eq!(fixture("fig9"), catalog::fig9());
    assert_eq!(fixture("chain_pair"), catalog::chain_pair());
}

#[test]
fn every_fixture_synthesizes() {
    for name in ["star", "fig1", "fig2a", "fig2b", "fig7", "fig9"] {
        let tree = fixture(name);
        let (t, l, _) = normalize_for_synthesis(&tree, &assign_layers(&tree)).unwrap();
        let plan = SynthesisPlan::new(&t, &l).unwrap();
        let pi = SignDistribution::uniform(&t, 0.5).unwrap();
        let bounds = all_rate_bounds(&t, &l, &pi, 2_000, 1).unwrap();
        assert!(bounds.iter().all(|b| b.sum_bound.is_finite() && b.y_bound.is_finite()), "{name}");
        let rates = RateTuple::from_bounds(&bounds, 1.2).unwrap();
        let src = VirtualCodebooks::new(plan, 32, rates, pi, 9).unwrap();
        let out = synthesize_one(&src, &mut substream(2, name, &[])).unwrap();
        assert_eq!(out.observables, tree.observables(), "{name}");
        assert_eq!(out.chain.len(), l.top());
        assert!(out.x.iter().all(|v| v.is_finite()));
        verify_provenance(&src, &out).unwrap();
    }
}

#[test]
fn random_general_trees_exercise_both_rewrites() {
    let mut rng = substream(11, "general", &[]);
    let opts = RandomTreeOptions { max_latents: 6, ..Default::default() };
    let (mut pseudo, mut moves) = (0, 0);
    for _ in 0..200 {
        let tree = random_general_tree(&mut rng, &opts, 0.5);
        let (_, _, log) = normalize_for_synthesis(&tree, &assign_layers(&tree)).unwrap();
        pseudo += log.count(TransformKind::PseudoNode);
        moves += log.count(TransformKind::LayerMove);
    }
    assert!(pseudo > 20 && moves > 20, "pseudo {pseudo}, moves {moves}");
}
