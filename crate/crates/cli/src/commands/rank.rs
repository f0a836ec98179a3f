use std::fs::File;
use std::path::PathBuf;

use clap::Args;
use glassnorm::eval::{RankTable, TiePolicy};

use super::require_file;
use crate::{usage, CmdResult, Global};

#[derive(Args)]
pub struct RankArgs {
    /// CSV with a `method` column and one column per metric; metric
    /// headers end in `^` (higher is better) or `v` (lower is better).
    table: PathBuf,
    /// ordinal | fractional | min
    #[arg(long, default_value = "ordinal")]
    tie_policy: String,
    /// Also write the ranked table here.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

pub fn run(_g: &Global, a: RankArgs) -> CmdResult {
    let policy: TiePolicy = a.tie_policy.parse().map_err(|e: glassnorm::Error| usage(e.to_string()))?;
    require_file(&a.table)?;
    let f = File::open(&a.table).map_err(|e| usage(format!("{}: {e}", a.table.display())))?;
    let table = RankTable::from_csv(f).map_err(|e| usage(format!("{}: {e}", a.table.display())))?;
    if let Some(o) = &a.out {
        let file = File::create(o).map_err(|e| anyhow::anyhow!("{}: {e}", o.display()))?;
        table.write_ranked_csv(policy, file)?;
    }
    table.write_ranked_csv(policy, std::io::stdout().lock())?;
    Ok(())
}
