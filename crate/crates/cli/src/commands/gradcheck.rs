use clap::Args;
use glassnorm::gradsuite::{run_suite, DEFAULT_TOL};

use crate::{usage, CmdResult, Global};

#[derive(Args)]
pub struct GradcheckArgs {
    /// Random instances per operation.
    #[arg(long, default_value_t = 10)]
    instances: usize,
    /// Relative tolerance.
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
    /// Print the full report as JSON.
    #[arg(long)]
    json: bool,
}

pub fn run(g: &Global, a: GradcheckArgs) -> CmdResult {
    if a.instances == 0 || !(a.tol > 0.0) {
        return Err(usage("instances and tol must be positive"));
    }
    let results = run_suite(a.instances, g.seed.unwrap_or(0), a.tol)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&results)?);
    } else {
        for r in &results {
            println!(
                "{:<24} {}  checks {:>3}  max rel {:.2e}  max abs {:.2e}",
                r.name,
                if r.passed() { "ok  " } else { "FAIL" },
                r.checks,
                r.max_rel_error,
                r.max_abs_error
            );
            if let Some(f) = &r.first_failure {
                println!("    {f}");
            }
        }
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(anyhow::anyhow!("gradient check failed for {}", failed.join(", ")).into())
    }
}
