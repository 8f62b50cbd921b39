//! Analytic gradients of the adaptation losses with respect to encoder
//! parameters against central finite differences.

mod common;

use common::gradcheck::{self, TOL};

#[test]
fn instances_stay_small() {
    assert!(gradcheck::max_encoder_params() <= 500);
}

#[test]
fn commitment_gradient() {
    let r = gradcheck::commitment(6);
    assert!(r.checked >= 3, "{r:?}");
    assert!(r.worst <= TOL, "{r:?}");
}

#[test]
fn contrastive_gradient() {
    let r = gradcheck::contrastive(4);
    assert!(r.worst <= TOL, "{r:?}");
}

#[test]
fn sal_gradient_through_straight_through() {
    let r = gradcheck::sal(4);
    assert!(r.worst <= TOL, "{r:?}");
}

#[test]
fn composite_gradient() {
    let r = gradcheck::composite(3);
    assert!(r.checked >= 2, "{r:?}");
    assert!(r.worst <= TOL, "{r:?}");
}

#[test]
fn straight_through_has_identity_jacobian() {
    assert!(gradcheck::straight_through_is_identity(5));
}
