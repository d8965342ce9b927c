use agat_core::gradcheck;

#[test]
fn probe_full_suite() {
    let t0 = std::time::Instant::now();
    let outcomes = gradcheck::run_suite(20260810, 10, None).unwrap();
    for o in &outcomes {
        println!("{:-40} max_rel_err {:.3e}  ({} checks)", o.name, o.max_rel_err, o.checks);
    }
    println!("elapsed: {:?}", t0.elapsed());
    assert!(outcomes.iter().all(|o| o.passed(gradcheck::DEFAULT_TOL)));
}
