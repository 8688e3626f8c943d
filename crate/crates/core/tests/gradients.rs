//! Finite-difference verification of the backward pass: every differentiable
//! primitive and the end-to-end training loss.

mod common;

use common::fd;

#[test]
fn conv_matches_finite_differences() {
    fd::conv();
}

#[test]
fn upsample_matches_finite_differences() {
    fd::upsample();
}

#[test]
fn pooling_matches_finite_differences() {
    fd::pooling();
}

#[test]
fn pointwise_ops_match_finite_differences() {
    fd::pointwise();
}

#[test]
fn softmax_matches_finite_differences() {
    fd::softmax();
}

#[test]
fn channel_wiring_matches_finite_differences() {
    fd::channel_wiring();
}

#[test]
fn arithmetic_matches_finite_differences() {
    fd::arithmetic();
}

#[test]
fn reductions_match_finite_differences() {
    fd::reductions();
}

#[test]
fn total_loss_through_the_network_matches_finite_differences() {
    fd::end_to_end_all_variants(20);
}
