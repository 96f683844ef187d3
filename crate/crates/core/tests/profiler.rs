use effloc::model::{EffLocModel, ModelConfig};
use effloc::profiler::{compare_param_counts, profile, verify_param_count, REFERENCE_FIGURES};

#[test]
fn named_configs_self_consistent() {
    for cfg in ModelConfig::named_configs() {
        let model = EffLocModel::<f64>::new(cfg.clone(), 0).unwrap();
        let check = verify_param_count(&model).unwrap();
        assert!(check.passed(), "{}: {:?}", cfg.name, check.diffs);
        assert_eq!(check.analytic_total, model.num_params() as u64);
    }
}

#[test]
fn fault_injection_names_the_bias() {
    let model = EffLocModel::<f64>::new(ModelConfig::tiny(), 0).unwrap();
    let mut report = profile(&model.config, 64, true).unwrap();
    let row = report.rows.iter_mut().find(|r| r.module == "head.out").unwrap();
    row.params -= 6;
    let check = compare_param_counts(&report, &model);
    assert!(!check.passed());
    // analytic lost exactly the 6-element bias
    assert_eq!(check.diffs, vec![("head.out".to_string(), 128 * 6, 128 * 6 + 6)]);
}

#[test]
fn reference_bands_and_ordering() {
    let mut prev = (0, 0);
    for (name, p_ref, f_ref) in REFERENCE_FIGURES.iter().rev() {
        let r = profile(&ModelConfig::named(name).unwrap(), 256, true).unwrap();
        let dp = r.totals.params as f64 / p_ref - 1.0;
        let dm = r.totals.macs as f64 / f_ref - 1.0;
        println!("{name}: params {} ({dp:+.3}) macs {} ({dm:+.3})", r.totals.params, r.totals.macs);
        assert!(dp.abs() <= 0.20 && dm.abs() <= 0.25);
        assert!(r.totals.params > prev.0 && r.totals.macs > prev.1);
        prev = (r.totals.params, r.totals.macs);
    }
}

mod random_configs {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn analytic_matches_instantiation(
            heads in proptest::array::uniform3(1usize..4),
            mult in proptest::array::uniform3(1usize..4),
            depths in proptest::array::uniform3(1usize..3),
            ffn_count in 1usize..3,
            ffn_expansion in 1usize..4,
            qk in 1usize..9,
            hidden in proptest::collection::vec(1usize..20, 0..3),
            literal in any::<bool>(),
        ) {
            let mut cfg = ModelConfig::tiny();
            cfg.heads = heads;
            cfg.widths = [heads[0] * mult[0], heads[1] * mult[1], heads[2] * mult[2]];
            cfg.depths = depths;
            cfg.ffn_count = ffn_count;
            cfg.ffn_expansion = ffn_expansion;
            cfg.qk_dim = [qk; 3];
            cfg.regressor_hidden = hidden;
            cfg.literal_outer_softmax = literal;
            let model = EffLocModel::<f64>::new(cfg, 1).unwrap();
            let check = verify_param_count(&model).unwrap();
            prop_assert!(check.passed(), "{:?}", check.diffs);
        }
    }
}
