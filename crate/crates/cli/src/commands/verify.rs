use anyhow::Result;
use qsft_core::par::Exec;
use qsft_core::tabular::{run_bound_suite, SuiteConfig};

use super::Run;
use crate::args::VerifyArgs;
use crate::{fail, ExitClass};

/// `a..b`, `a..=b` (both inclusive) or a single count.
fn parse_range(s: &str) -> Option<(usize, usize)> {
    let s = s.trim();
    if let Some((a, b)) = s.split_once("..") {
        let b = b.strip_prefix('=').unwrap_or(b);
        Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
    } else {
        let n = s.parse().ok()?;
        Some((n, n))
    }
}

pub fn run(args: VerifyArgs, argv: Vec<String>) -> Result<()> {
    let invalid = |m: String| fail(ExitClass::InvalidArgument, m);
    let (min_actions, max_actions) =
        parse_range(&args.actions).ok_or_else(|| invalid(format!("--actions: expected a..b, got '{}'", args.actions)))?;
    let cfg = SuiteConfig {
        num_mdps: args.seeds,
        base_seed: args.seed,
        min_states: args.min_states,
        max_states: args.max_states,
        min_actions,
        max_actions,
        discounts: args.gamma.clone(),
        branching: args.branching,
        tol: args.tol,
        ..Default::default()
    };
    cfg.validate().map_err(|e| invalid(e.to_string()))?;

    let run = Run::new(argv, "verify", Some(args.seed), &args.out, "manifest.json");
    run.execute(|run| {
        run.manifest.config = serde_json::to_value(&cfg)?;
        let report = run_bound_suite(&cfg, Exec::default()).map_err(|e| fail(ExitClass::InvalidArgument, e))?;
        // the table prints them; the manifest keeps them
        run.manifest.warnings.extend(report.warnings.iter().cloned());
        run.write("report.json", report.to_json().as_bytes())?;
        print!("{}", report.table());
        if !report.passed() {
            return Err(fail(
                ExitClass::Verification,
                format!(
                    "{} bound violations and {} unsolved MDPs; offending (seed, state, action) triples are in report.json",
                    report.violations.len(),
                    report.unsolved.len()
                ),
            ));
        }
        Ok(())
    })
}
