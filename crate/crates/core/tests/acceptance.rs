//! Every acceptance criterion at its stated tolerance, one PASS/FAIL line
//! each. The end-to-end training runs take a few hours on one core, so this
//! is ignored by default:
//!
//! ```text
//! cargo test --release -p h2o2 --test acceptance -- --ignored --nocapture
//! ```

mod common;

use common::criteria::{
    end_to_end, gradient_suite, horizon_telemetry, offline_beats_bc, regularizer_dominance,
    relabel_invariants, smdp_semantics, vtrace_oracle, Verdict,
};
use std::time::Instant;

fn timed(f: impl FnOnce() -> Verdict) -> Verdict {
    let start = Instant::now();
    let mut v = f();
    v.detail = format!("{} [{:.0?}]", v.detail, start.elapsed());
    println!("{}", v.line());
    v
}

#[test]
#[ignore]
fn acceptance() {
    let mut verdicts = vec![
        timed(vtrace_oracle),
        timed(|| gradient_suite(10)),
        timed(|| regularizer_dominance(1500)),
        timed(|| relabel_invariants(100_000)),
    ];
    let start = Instant::now();
    let (mut seven, streams) = end_to_end(2_000_000);
    seven.detail = format!("{} [{:.0?}]", seven.detail, start.elapsed());
    // the long runs also feed the telemetry checks
    verdicts.push(timed(|| smdp_semantics(&streams)));
    verdicts.push(timed(|| offline_beats_bc(500, 6000)));
    println!("{}", seven.line());
    verdicts.push(seven);
    verdicts.push(timed(horizon_telemetry));

    verdicts.sort_by_key(|v| v.id);
    println!("\nsummary");
    for v in &verdicts {
        println!("{}", v.line());
    }
    let failed: Vec<u8> = verdicts.iter().filter(|v| !v.pass).map(|v| v.id).collect();
    assert!(failed.is_empty(), "criteria failed: {failed:?}");
}
