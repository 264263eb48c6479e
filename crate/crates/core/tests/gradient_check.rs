//! Central finite differences against the analytic backward pass.

mod common;

#[test]
fn base_gradients_match_finite_differences() {
    let (worst, at) = common::base_gradient_error();
    println!("worst base relative error {worst:.3e} at {at}");
    assert!(worst <= 1e-4, "{worst} at {at}");
}

#[test]
fn adapter_gradients_match_finite_differences() {
    let worst = common::adapter_gradient_error();
    println!("worst adapter relative error {worst:.3e}");
    assert!(worst <= 1e-4, "{worst}");
}
