use crnet::train::gradcheck::{grad_check, MODULES};
use crnet::train::ShapeSpec;

const TOL: f64 = 1e-4;

fn check(module: &str, c: usize, hw: usize) {
    let r = grad_check(module, ShapeSpec { channels: c, height: hw, width: hw }, 1e-5, 11).unwrap();
    assert!(r.passed(TOL), "{module} C={c} H=W={hw}: {r:?}");
}

#[test]
fn every_module_matches_finite_differences() {
    for m in MODULES {
        check(m, 8, 6);
    }
}

#[test]
fn small_odd_shapes_also_match() {
    for m in MODULES {
        check(m, 4, 3);
    }
}

#[test]
fn unknown_module_is_an_error() {
    assert!(grad_check("decoder2", ShapeSpec { channels: 4, height: 4, width: 4 }, 1e-5, 0).is_err());
}

