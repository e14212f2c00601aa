use std::collections::BTreeMap;

use camforge_core::gradcheck::standard_suite;

#[test]
fn every_op_and_a_full_layer_pass_over_twenty_seeds() {
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    for seed in 0..20 {
        for r in standard_suite(seed).unwrap() {
            let op = r.label.split('/').next().unwrap().to_string();
            let e = r.relative_error();
            let w = worst.entry(op).or_insert(0.0);
            *w = w.max(e);
        }
    }
    for (op, e) in &worst {
        eprintln!("{op:<16} max relative error {e:.2e}");
    }
    assert!(worst.len() >= 20);
    for (op, e) in worst {
        assert!(e < 1e-3, "{op}: {e}");
    }
}
