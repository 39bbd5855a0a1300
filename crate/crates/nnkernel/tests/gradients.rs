use polyrnn_nn::gradcheck::suite;

#[test]
fn every_op_passes_finite_differences_over_twenty_seeds() {
    let mut worst: std::collections::BTreeMap<&str, f64> = Default::default();
    for seed in 0..20 {
        for (op, err) in suite::run(seed) {
            let w = worst.entry(op).or_default();
            *w = w.max(err);
            assert!(err < 1e-6, "{op} seed {seed}: relative error {err:e}");
        }
    }
    for (op, err) in worst {
        println!("{op:>16}: {err:.2e}");
    }
}

#[test]
fn forward_ops_are_deterministic() {
    let a = suite::run(7);
    let b = suite::run(7);
    assert_eq!(
        a.iter().map(|(_, e)| e.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|(_, e)| e.to_bits()).collect::<Vec<_>>()
    );
}
