//! Hypothesis audit for the built-in kernel families.
//!
//! `cargo run --release --example audit`

use nlthin::kernels::{audit_hypotheses, Kernel, Profile};

fn main() {
    let d = 2;
    let p = 2.0;
    let kernels = [
        Kernel::cylinder_indicator(d, 1.0),
        Kernel::cylinder_over_norm_p(d, 1.0, p),
        Kernel::mollifier_over_norm_p(d, p),
        Kernel::separable(d, Profile::Gaussian { sigma: 0.5 }, Profile::Indicator { half_width: 1.0 }, p),
        Kernel::vertical_singular(d, 0.5),
    ];
    println!("{:<24} {:>5} {:>5} {:>5} {:>5} {:>5}", "family", "H0", "H1", "H2", "H3", "H4");
    for k in &kernels {
        let r = audit_hypotheses(k, p);
        let mark = |b: bool| if b { "ok" } else { "FAIL" };
        println!(
            "{:<24} {:>5} {:>5} {:>5} {:>5} {:>5}",
            r.family,
            mark(r.h0.pass),
            mark(r.h1.pass),
            mark(r.h2.pass),
            mark(r.h3.pass),
            mark(r.h4.pass)
        );
        if let Some(note) = &r.h3.note {
            println!("    H3: {note}");
        }
    }
}
