use noran::gradcheck::{run_suite, COMPONENTS, TOLERANCE};
use noran::tensor::Fault;

#[test]
fn every_component_within_tolerance() {
    let report = run_suite(0, None).unwrap();
    println!("{report}");
    for comp in COMPONENTS {
        let worst = report.worst(comp).expect("component ran");
        assert!(worst.max_rel_error < TOLERANCE, "{comp}: {worst:?}");
    }
    assert!(report.passed());
}

#[test]
fn scaled_matmul_backward_fails_suite() {
    let report = run_suite(0, Some(Fault::ScaleMatmulBackward(1.01))).unwrap();
    assert!(!report.passed());
    assert!(report.worst("layers").unwrap().max_rel_error >= TOLERANCE);
}
