//! Reverse-mode gradients against central finite differences.

mod common;

use common::{candidate_net, check_network, check_retention_block, fallback_net, locking_net, op_cases};
use pgr_core::network::{Mode, Path};

fn check_group(group: &str) {
    let cases: Vec<_> = op_cases().into_iter().filter(|c| c.group == group).collect();
    assert!(!cases.is_empty());
    for c in cases {
        if let Err(e) = c.check() {
            panic!("{e}");
        }
    }
}

#[test]
fn arithmetic_ops() {
    check_group("arithmetic");
}

#[test]
fn elementwise_ops() {
    check_group("elementwise");
}

#[test]
fn reduction_and_shape_ops() {
    check_group("reduction");
}

#[test]
fn spatial_ops() {
    check_group("spatial");
}

#[test]
fn loss_ops() {
    check_group("loss");
}

#[test]
fn roi_ops() {
    check_group("roi");
}

#[test]
fn retention_block_parameters() {
    check_retention_block().unwrap();
}

#[test]
fn full_forward_candidate_mode() {
    let nonzero = check_network(candidate_net(), Mode::Candidate, Path::Candidate, 120, 1).unwrap();
    assert!(nonzero >= 50, "only {nonzero} probed parameters carried gradient");
}

#[test]
fn full_forward_locked_path() {
    check_network(locking_net(), Mode::Gate, Path::Locked, 60, 2).unwrap();
}

#[test]
fn full_forward_fallback_path() {
    check_network(fallback_net(), Mode::Fallback, Path::Fallback, 60, 3).unwrap();
}
