//! Acceptance suite: runs every criterion on its reference configuration
//! and prints one PASS/FAIL line per criterion, followed by the individual
//! checks. Exits non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use mdp_spde_lab::verify::suite;
use mdp_spde_lab::verify::CheckResult;
use mdp_spde_lab::Result;

type Criterion = (&'static str, f64, fn() -> Result<Vec<CheckResult>>);

fn criteria() -> Vec<Criterion> {
    vec![
        ("1 coefficient identities", 1.0, suite::coefficient_identities),
        ("2 heat semigroup", 1.0, suite::heat_semigroup_checks),
        ("3 controlled-map algebra", 10.0, suite::controlled_map_checks),
        ("4 rate equivalence", 120.0, suite::rate_equivalence_checks),
        ("5 change of variables", 1.0, suite::change_of_variables_checks),
        ("6 martingale quadratic variation", 300.0, || suite::martingale_checks(None)),
        ("7 Gaussian fluctuation covariance", 300.0, || suite::fluctuation_covariance_checks(None)),
        ("8 scale invariance across eps", 600.0, || suite::scale_invariance_suite(None)),
        ("9 rate/covariance duality", 120.0, suite::duality_checks),
        ("10 moment scaling", 300.0, || suite::moment_scaling_checks(None)),
    ]
}

fn main() -> ExitCode {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (name, budget, run) in criteria() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(checks) => {
                let ok = !checks.is_empty() && checks.iter().all(CheckResult::passed);
                let verdict = if ok { "PASS" } else { "FAIL" };
                println!("{verdict} criterion {name} ({} checks, {secs:.1}s, budget {budget:.0}s)", checks.len());
                for c in &checks {
                    println!("    {}", c.line());
                }
                if !ok {
                    failed += 1;
                }
            }
            Err(e) => {
                println!("FAIL criterion {name}: error: {e}");
                failed += 1;
            }
        }
    }
    println!("\nThe exponential tail asymptotics of the moderate deviation principle are not observable at desk scale;");
    println!("criteria 7-9 check the quadratic form that determines the rate instead.");
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
