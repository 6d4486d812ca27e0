use dcml_core::gradcheck::{gradcheck_suite, TOLERANCE};
use dcml_tensor::Primitive;

#[test]
fn suite_passes_for_several_seeds() {
    for seed in [0, 1, 2] {
        let report = gradcheck_suite(seed, None);
        let failed: Vec<_> = report.failures().collect();
        assert!(report.passed, "seed {seed}: {failed:#?}");
        assert!(report.entries.iter().all(|e| e.max_rel_err < TOLERANCE));
    }
}

#[test]
fn every_primitive_and_loss_is_covered() {
    let report = gradcheck_suite(0, None);
    for kind in Primitive::ALL {
        let name = format!("primitive/{}", kind.name());
        assert!(report.entries.iter().any(|e| e.name == name), "missing {name}");
    }
    for name in [
        "fusion/gate_vector",
        "fusion/gate_map",
        "loss/info_nce",
        "loss/abs_correlation",
        "loss/identity_ce",
        "loss/deaging_total",
        "loss/race_ce",
    ] {
        assert!(report.entries.iter().any(|e| e.name == name), "missing {name}");
    }
}

#[test]
fn corrupted_rule_fails_only_its_entry() {
    for kind in [Primitive::Matmul, Primitive::Variance, Primitive::ChannelScale] {
        let report = gradcheck_suite(4, Some(kind));
        let failed: Vec<&str> = report.failures().map(|e| e.name.as_str()).collect();
        assert_eq!(failed, vec![format!("primitive/{}", kind.name())], "{kind:?}");
        assert!(!report.passed);
    }
}

#[test]
fn report_is_deterministic() {
    assert_eq!(gradcheck_suite(9, None), gradcheck_suite(9, None));
}
