mod common;

use common::{compare_with_dense_svd, operator_oracle, random_operator, rng, OpKind};
use hsi_restore::degradation::DegradationOperator;

#[test]
fn structured_svd_matches_dense_svd() {
    let v = operator_oracle(50, 2024);
    assert!(v.pass, "{}", v.detail);
}

#[test]
fn largest_instances_stay_within_bound() {
    let mut r = rng(5);
    // 10 x 10 x 10 completion and 16 x 16 x 3 block averaging, both near n = 1000
    let mask: Vec<bool> = (0..1000).map(|i| i % 7 != 3).collect();
    let ops = [
        DegradationOperator::completion(common::dims(10, 10, 10), &mask).unwrap(),
        DegradationOperator::sr_block(common::dims(16, 16, 3), 4).unwrap(),
    ];
    for op in &ops {
        let d = compare_with_dense_svd(op, &mut r);
        assert!(d.worst() < 1e-8, "{d:?}");
    }
}

#[test]
fn random_instances_respect_size_limit() {
    let mut r = rng(9);
    for kind in [OpKind::Denoise, OpKind::Completion, OpKind::Sr] {
        for _ in 0..200 {
            assert!(random_operator(kind, &mut r).input_len() <= 1000);
        }
    }
}
