//! Analytic gradients against central differences in f64.

mod common;

use common::grad::*;

fn assert_small(errs: &[(String, f64)]) {
    for (name, e) in errs {
        println!("{name}: {e:.3e}");
        assert!(*e <= TOL, "{name}: relative error {e:.3e}");
    }
}

#[test]
fn encoder_grids_window_and_gop() {
    let errs = encoder_errors();
    assert_eq!(errs.len(), 4);
    assert_small(&errs);
}

#[test]
fn one_msf_block() {
    assert_small(&msf_block_errors());
}

#[test]
fn sa_loss_every_level() {
    let errs = sa_loss_errors();
    assert_eq!(errs.len(), 6);
    assert_small(&errs);
}

#[test]
fn hf_boost_wrt_target() {
    let (errs, leak) = hf_boost_errors();
    assert_small(&errs);
    // The reconstruction enters detached.
    assert_eq!(leak, 0.0);
}

#[test]
fn boosted_target_inside_full_loss() {
    assert_small(&boosted_loss_errors());
}
