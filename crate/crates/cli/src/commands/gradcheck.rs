//! `gaitrm gradcheck`: compare every analytic gradient in the chosen
//! scope against central finite differences in 64-bit and report each
//! check on its own line.

use clap::Args;
use gaitrm_core::error::Result;
use gaitrm_core::gradcheck::{run_gradcheck, CheckScope};

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// What to check: `op` (each primitive), `block` (assembled blocks)
    /// or `model` (full forward/backward)
    #[arg(long)]
    pub scope: String,
    /// Seed for the probe tensors
    #[arg(long, default_value_t = 3)]
    pub seed: u64,
    /// Deliberately corrupt one gradient to exercise the failure path
    #[arg(long, hide = true, default_value_t = false)]
    pub corrupt: bool,
}

pub fn run(args: &GradcheckArgs) -> Result<i32> {
    let scope = CheckScope::parse(&args.scope)?;
    let reports = run_gradcheck(scope, args.seed, args.corrupt)?;
    let mut failed = 0usize;
    for r in &reports {
        let status = if r.passed() { "ok  " } else { "FAIL" };
        println!(
            "{status} {:<40} max rel err {:.3e} (tol {:.0e})",
            r.name, r.max_rel_err, r.tol
        );
        if !r.passed() {
            failed += 1;
        }
    }
    if failed > 0 {
        eprintln!("{failed} of {} gradient checks failed", reports.len());
        return Ok(1);
    }
    println!("all {} gradient checks passed", reports.len());
    Ok(0)
}
