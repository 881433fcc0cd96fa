use san_core::accounting::{count, search_resnet_stages, verify_against_runtime};
use san_core::attention::{AttentionConfig, Operator, PairwiseRelation, PatchRelation, PositionMode};
use san_core::models::ModelSpec;

fn within(value: f64, target: f64, tol: f64) -> bool {
    ((value - target) / target).abs() <= tol
}

fn pairwise(relation: PairwiseRelation) -> AttentionConfig {
    AttentionConfig::pairwise(relation)
}

fn patchwise(relation: PatchRelation) -> AttentionConfig {
    AttentionConfig::patchwise(relation)
}

fn san(name: &str, cfg: AttentionConfig) -> ModelSpec {
    ModelSpec::preset(name, Some(cfg)).unwrap()
}

fn params_m(spec: &ModelSpec) -> f64 {
    count(spec).unwrap().params_m()
}

fn macs_g(spec: &ModelSpec) -> f64 {
    count(spec).unwrap().macs_g()
}

#[test]
fn san_params_table() {
    let sub = pairwise(PairwiseRelation::Subtraction);
    let cat = patchwise(PatchRelation::Concatenation);
    for (name, pair, patch) in [("san10", 10.5, 11.8), ("san15", 14.1, 16.2), ("san19", 17.6, 20.5)] {
        let (p, q) = (params_m(&san(name, sub)), params_m(&san(name, cat)));
        assert!(within(p, pair, 0.02), "{name} pairwise {p}");
        assert!(within(q, patch, 0.02), "{name} patchwise {q}");
    }
}

#[test]
fn resnet_params_and_macs() {
    for (name, p, m) in [("resnet26", 13.7, 2.4), ("resnet38", 19.6, 3.2), ("resnet50", 25.6, 4.1)] {
        let spec = ModelSpec::preset(name, None).unwrap();
        assert!(within(params_m(&spec), p, 0.02), "{name} params {}", params_m(&spec));
        assert!(within(macs_g(&spec), m, 0.10), "{name} macs {}", macs_g(&spec));
    }
}

#[test]
fn pinned_resnet_stages_are_search_hits() {
    let hits26 = search_resnet_stages(13.7e6, 0.02, 6).unwrap();
    assert!(hits26.iter().any(|(b, _)| *b == [1, 2, 4, 1]), "{hits26:?}");
    let hits38 = search_resnet_stages(19.6e6, 0.02, 6).unwrap();
    assert!(hits38.iter().any(|(b, _)| *b == [2, 3, 5, 2]), "{hits38:?}");
}

#[test]
fn footprint_sweep() {
    let pair_macs = [1.7, 1.9, 2.2, 2.5, 3.0];
    let patch_params = [10.7, 11.2, 11.8, 12.7, 13.8];
    let base = params_m(&san("san10", pairwise(PairwiseRelation::Subtraction)));
    let mut last_patch = 0.0;
    for (i, k) in [3, 5, 7, 9, 11].into_iter().enumerate() {
        let pair = san("san10", pairwise(PairwiseRelation::Subtraction)).with_footprint(k).unwrap();
        let patch = san("san10", patchwise(PatchRelation::Concatenation)).with_footprint(k).unwrap();
        assert_eq!(params_m(&pair), base, "k={k}");
        assert!(within(macs_g(&pair), pair_macs[i], 0.10), "k={k} macs {}", macs_g(&pair));
        let q = params_m(&patch);
        assert!(within(q, patch_params[i], 0.02), "k={k} patch params {q}");
        assert!(q > last_patch);
        last_patch = q;
    }
}

#[test]
fn gamma_depth_sweep() {
    let expect = [(1, 53.5, 9.5, 0.05), (2, 11.8, 1.9, 0.02), (3, 12.7, 2.0, 0.02)];
    for (depth, p, m, tol) in expect {
        let mut cfg = patchwise(PatchRelation::Concatenation);
        cfg.gamma_depth = depth;
        let spec = san("san10", cfg);
        assert!(within(params_m(&spec), p, tol), "depth {depth} params {}", params_m(&spec));
        assert!(within(macs_g(&spec), m, 0.10), "depth {depth} macs {}", macs_g(&spec));
    }
}

#[test]
fn relation_sweep() {
    let cases = [(PairwiseRelation::Concatenation, 10.6), (PairwiseRelation::Dot, 10.5)];
    for (rel, p) in cases {
        assert!(within(params_m(&san("san10", pairwise(rel))), p, 0.02), "{rel:?}");
    }
    assert!(within(macs_g(&san("san10", patchwise(PatchRelation::Concatenation))), 1.9, 0.10));
    assert!(within(macs_g(&san("san10", pairwise(PairwiseRelation::Subtraction))), 2.2, 0.10));
}

#[test]
fn symbolic_matches_runtime() {
    let mut specs = vec![
        ModelSpec::preset("san-tiny", None).unwrap(),
        ModelSpec::preset("resnet26", None).unwrap(),
        san("san10", patchwise(PatchRelation::CliqueProduct)).with_footprint(3).unwrap(),
    ];
    for op in [Operator::Scalar { normalize: true }, Operator::Conv] {
        specs.push(ModelSpec::san_tiny(AttentionConfig { operator: op, ..pairwise(PairwiseRelation::Dot) }));
    }
    specs.push(ModelSpec::san_tiny(AttentionConfig {
        operator: Operator::Pairwise { relation: PairwiseRelation::Hadamard, position: PositionMode::None },
        ..pairwise(PairwiseRelation::Dot)
    }));
    for spec in specs {
        let check = verify_against_runtime(&spec).unwrap();
        assert!(check.matches(), "{}: {:?}", spec.name, check.mismatches);
    }
}
