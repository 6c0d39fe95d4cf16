use std::time::Instant;

use guidedseg_core::gradcheck;
use guidedseg_core::model::{Fusion, GuidanceConfig, Head, Locality};

fn variants() -> Vec<GuidanceConfig> {
    let base = GuidanceConfig::default();
    vec![
        base.clone(),
        base.clone().with_locality(Locality::Identity),
        base.clone().with_head(Head::ParamRegression),
        base.clone().with_head(Head::Prototype),
        base.clone().with_head(Head::Unguided),
        base.with_fusion(Fusion::Early),
    ]
}

#[test]
fn whole_network_gradients_match_finite_differences() {
    let start = Instant::now();
    for cfg in variants() {
        for seed in 0..10 {
            let rep = gradcheck::network(cfg.clone(), seed, 16, 4).unwrap();
            assert!(rep.checked > 0, "{:?}/{:?} seed {seed}", cfg.head, cfg.fusion);
            assert!(
                rep.max_relative_error < 1e-3,
                "{:?}/{:?}/{:?} seed {seed}: {rep:?}",
                cfg.fusion,
                cfg.head,
                cfg.locality
            );
        }
    }
    eprintln!("network gradcheck took {:.1}s", start.elapsed().as_secs_f64());
}
