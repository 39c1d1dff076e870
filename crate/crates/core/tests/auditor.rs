use nlthin::kernels::{audit_hypotheses, Kernel};

#[test]
fn indicator_over_norm_kernel_is_admissible() {
    for p in [1.5, 2.0, 3.0] {
        let r = audit_hypotheses(&Kernel::cylinder_over_norm_p(2, 1.0, p), p);
        assert!(r.all_pass(), "p = {p}: {r:#?}");
    }
}

#[test]
fn mollifier_over_norm_kernel_is_admissible() {
    for p in [1.5, 2.0, 3.0] {
        let r = audit_hypotheses(&Kernel::mollifier_over_norm_p(2, p), p);
        assert!(r.all_pass(), "p = {p}: {r:#?}");
    }
}

#[test]
fn vertically_singular_kernel_fails_slice_bound() {
    let r = audit_hypotheses(&Kernel::vertical_singular(2, 0.5), 2.0);
    assert!(!r.h3.pass);
    assert!(r.h3.divergent);
    assert!(r.h1.pass, "finite moment expected: {:?}", r.h1);
}
